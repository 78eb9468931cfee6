use super::{Activation, Affine, ReprModel};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// `Z = act(W_e B + b_e)`, one latent column per time point.
pub fn encode(b: &DMatrix<f64>, encoder: &Affine, activation: Activation) -> Result<DMatrix<f64>> {
    if b.nrows() != encoder.in_dim() {
        return Err(Error::shape(format!("encoder expects {} rows, got {}", encoder.in_dim(), b.nrows())));
    }
    Ok(encoder.forward(b).map(|x| activation.apply(x)))
}

/// Affine decoder `B_hat = W_d Z + b_d`.
pub fn decode(z: &DMatrix<f64>, decoder: &Affine) -> Result<DMatrix<f64>> {
    if z.nrows() != decoder.in_dim() {
        return Err(Error::shape(format!("decoder expects {} rows, got {}", decoder.in_dim(), z.nrows())));
    }
    Ok(decoder.forward(z))
}

/// Mean squared entrywise reconstruction error of `decode(encode(B))`.
pub fn stage1_loss(b: &DMatrix<f64>, model: &ReprModel) -> Result<f64> {
    let z = encode(b, &model.encoder, model.activation)?;
    let r = decode(&z, &model.decoder)? - b;
    Ok(r.norm_squared() / r.len() as f64)
}

#[derive(Debug, Clone)]
pub struct Stage1Grad {
    pub loss: f64,
    pub encoder: Affine,
    pub decoder: Affine,
}

pub fn stage1_loss_grad(b: &DMatrix<f64>, model: &ReprModel) -> Result<Stage1Grad> {
    let z = encode(b, &model.encoder, model.activation)?;
    let r = decode(&z, &model.decoder)? - b;
    let n = r.len() as f64;
    let loss = r.norm_squared() / n;
    let g = r * (2.0 / n);
    let dec = Affine { w: &g * z.transpose(), b: row_sums(&g) };
    let mut dpre = model.decoder.w.transpose() * &g;
    dpre.zip_apply(&z, |d, y| *d *= model.activation.derivative_from_output(y));
    let enc = Affine { w: &dpre * b.transpose(), b: row_sums(&dpre) };
    Ok(Stage1Grad { loss, encoder: enc, decoder: dec })
}

pub(crate) fn row_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.nrows(), |i, _| m.row(i).sum())
}

/// Principal-subspace warm start: encoder `U^T`, decoder `U` and row means as decoder bias,
/// where `U` holds the leading `d` left singular vectors of the row-centred data.
/// Missing directions (rank below `d`) are left as zero columns.
pub fn pca_init(b: &DMatrix<f64>, d: usize) -> (Affine, Affine) {
    let v = b.nrows();
    let means = DVector::from_fn(v, |i, _| b.row(i).mean());
    let mut centred = b.clone();
    for mut col in centred.column_iter_mut() {
        col -= &means;
    }
    let svd = centred.svd(true, false);
    let u_full = svd.u.expect("left vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut u = DMatrix::zeros(v, d);
    for (k, &idx) in order.iter().take(d).enumerate() {
        let mut col = u_full.column(idx).into_owned();
        let (imax, _) = col.iamax_full();
        if col[imax] < 0.0 {
            col = -col;
        }
        u.set_column(k, &col);
    }
    let enc_b = -(u.transpose() * &means);
    (Affine { w: u.transpose(), b: enc_b }, Affine { w: u, b: means })
}
