use super::autoencoder::{encode, row_sums};
use super::diffusion::{time_embedding, DiffusionSchedule};
use super::optim::Trainer;
use super::{Affine, Denoiser, ParamVec, ReprModel};
use crate::error::{Error, Result};
use crate::wave::{physics_loss, DynamicField};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Pattern tokens, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternRepresentation {
    pub z_pattern: DMatrix<f64>,
    pub t_star: usize,
    pub seed: u64,
}

impl PatternRepresentation {
    pub fn tokens(&self) -> usize {
        self.z_pattern.nrows()
    }

    /// Token mean, a d-vector.
    pub fn mean_token(&self) -> DVector<f64> {
        let m = self.z_pattern.nrows() as f64;
        DVector::from_fn(self.z_pattern.ncols(), |k, _| self.z_pattern.column(k).sum() / m)
    }
}

struct Extraction {
    z0: DMatrix<f64>,
    /// Noised latents for the `+eps` and `-eps` branches.
    noised: [DMatrix<f64>; 2],
    hidden: [DMatrix<f64>; 2],
    emb: DVector<f64>,
    sqrt_ab: f64,
    pattern: PatternRepresentation,
}

fn extraction_forward(
    b: &DMatrix<f64>,
    model: &ReprModel,
    schedule: &DiffusionSchedule,
    t_star: usize,
    seed: u64,
) -> Result<Extraction> {
    let ab = schedule.alpha_bar(t_star)?;
    let den = &model.denoiser;
    let d = model.latent_dim();
    if !den.hidden_dim().is_multiple_of(d) || den.latent_dim() != d {
        return Err(Error::shape(format!("denoiser hidden width {} is not a multiple of latent dim {d}", den.hidden_dim())));
    }
    let z0 = encode(b, &model.encoder, model.activation)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let scaled = eps * (1.0 - ab).sqrt();
    let mut noised = [&z0 * ab.sqrt(), &z0 * ab.sqrt()];
    for col in noised[0].column_iter_mut() {
        let mut col = col;
        col += &scaled;
    }
    for col in noised[1].column_iter_mut() {
        let mut col = col;
        col -= &scaled;
    }
    let hidden = [den.hidden(&noised[0], t_star), den.hidden(&noised[1], t_star)];
    let cols = 2.0 * z0.ncols() as f64;
    let h = den.hidden_dim();
    let pooled = DVector::from_fn(h, |i, _| (hidden[0].row(i).sum() + hidden[1].row(i).sum()) / cols);
    let tokens = h / d;
    let z_pattern = DMatrix::from_fn(tokens, d, |m, k| pooled[m * d + k]);
    Ok(Extraction {
        z0,
        noised,
        hidden,
        emb: time_embedding(t_star, den.embed_dim()),
        sqrt_ab: ab.sqrt(),
        pattern: PatternRepresentation { z_pattern, t_star, seed },
    })
}

/// Denoiser hidden activations at step `t_star`, evaluated on the encoded signal
/// noised with one seeded vector applied with both signs, mean-pooled over time
/// and sign and reshaped into `hidden / d` tokens of width `d`.
pub fn extract_pattern(
    b: &DMatrix<f64>,
    model: &ReprModel,
    schedule: &DiffusionSchedule,
    t_star: usize,
    seed: u64,
) -> Result<PatternRepresentation> {
    Ok(extraction_forward(b, model, schedule, t_star, seed)?.pattern)
}

/// Gradients of a scalar with respect to the encoder and denoiser, given its
/// gradient `dz_pattern` with respect to the pattern tokens.
pub fn pattern_backprop(
    b: &DMatrix<f64>,
    model: &ReprModel,
    schedule: &DiffusionSchedule,
    t_star: usize,
    seed: u64,
    dz_pattern: &DMatrix<f64>,
) -> Result<(Affine, Denoiser)> {
    let ex = extraction_forward(b, model, schedule, t_star, seed)?;
    backprop_from(&ex, b, model, dz_pattern)
}

fn backprop_from(ex: &Extraction, b: &DMatrix<f64>, model: &ReprModel, dzp: &DMatrix<f64>) -> Result<(Affine, Denoiser)> {
    let den = &model.denoiser;
    let d = model.latent_dim();
    if dzp.shape() != ex.pattern.z_pattern.shape() {
        return Err(Error::shape("token gradient shape differs from pattern shape"));
    }
    let h = den.hidden_dim();
    let t = ex.z0.ncols();
    let dpool = DVector::from_fn(h, |i, _| dzp[(i / d, i % d)] / (2.0 * t as f64));
    let mut grad = Denoiser::zeros(d, h, den.embed_dim(), den.activation);
    let mut dz0 = DMatrix::zeros(d, t);
    for s in 0..2 {
        let hid = &ex.hidden[s];
        let dpre = DMatrix::from_fn(h, t, |i, j| dpool[i] * den.activation.derivative_from_output(hid[(i, j)]));
        grad.w_in += &dpre * ex.noised[s].transpose();
        let rs = row_sums(&dpre);
        grad.w_time += &rs * ex.emb.transpose();
        grad.b_hidden += rs;
        dz0 += (den.w_in.transpose() * &dpre) * ex.sqrt_ab;
    }
    dz0.zip_apply(&ex.z0, |g, y| *g *= model.activation.derivative_from_output(y));
    let enc = Affine { w: &dz0 * b.transpose(), b: row_sums(&dz0) };
    Ok((enc, grad))
}

/// Token-wise pattern decoding `X_hat = W1 Z_pattern^T + b1`, one column per token.
pub fn decode_pattern(d1: &Affine, pattern: &PatternRepresentation) -> Result<DMatrix<f64>> {
    if pattern.z_pattern.ncols() != d1.in_dim() {
        return Err(Error::shape(format!("pattern decoder expects width {}, got {}", d1.in_dim(), pattern.z_pattern.ncols())));
    }
    Ok(d1.forward(&pattern.z_pattern.transpose()))
}

/// Mean of the decoded token maps broadcast over `t` columns.
pub fn pattern_reconstruction(d1: &Affine, pattern: &PatternRepresentation, t: usize) -> Result<DMatrix<f64>> {
    if pattern.z_pattern.ncols() != d1.in_dim() {
        return Err(Error::shape(format!("pattern decoder expects width {}, got {}", d1.in_dim(), pattern.z_pattern.ncols())));
    }
    let map = &d1.w * pattern.mean_token() + &d1.b;
    Ok(DMatrix::from_fn(map.len(), t, |i, _| map[i]))
}

/// Mean squared error of `B` against the broadcast pattern reconstruction.
pub fn stage3_loss(b: &DMatrix<f64>, pattern: &PatternRepresentation, d1: &Affine) -> Result<f64> {
    if b.nrows() != d1.out_dim() {
        return Err(Error::shape(format!("signal has {} rows, pattern decoder emits {}", b.nrows(), d1.out_dim())));
    }
    let r = pattern_reconstruction(d1, pattern, b.ncols())? - b;
    Ok(r.norm_squared() / r.len() as f64)
}

#[derive(Debug, Clone)]
pub struct PatternGrad {
    pub loss: f64,
    pub d1: Affine,
    pub z_pattern: DMatrix<f64>,
}

/// Gradient of [`stage3_loss`] with respect to D1 and the pattern tokens.
pub fn stage3_loss_grad(b: &DMatrix<f64>, pattern: &PatternRepresentation, d1: &Affine) -> Result<PatternGrad> {
    if b.nrows() != d1.out_dim() {
        return Err(Error::shape(format!("signal has {} rows, pattern decoder emits {}", b.nrows(), d1.out_dim())));
    }
    let r = pattern_reconstruction(d1, pattern, b.ncols())? - b;
    let n = r.len() as f64;
    let loss = r.norm_squared() / n;
    let g = row_sums(&r) * (2.0 / n);
    let zbar = pattern.mean_token();
    let dz = d1.w.transpose() * &g / pattern.tokens() as f64;
    let z_pattern = DMatrix::from_fn(pattern.tokens(), zbar.len(), |_, k| dz[k]);
    Ok(PatternGrad { loss, d1: Affine { w: &g * zbar.transpose(), b: g }, z_pattern })
}

/// Physics-guided loss of the pattern reconstruction against `Phi_dyn`.
pub fn physics_objective(
    b: &DMatrix<f64>,
    model: &ReprModel,
    schedule: &DiffusionSchedule,
    t_star: usize,
    seed: u64,
    phi_dyn: &DynamicField,
) -> Result<f64> {
    let pattern = extract_pattern(b, model, schedule, t_star, seed)?;
    let recon = pattern_reconstruction(&model.pattern_decoder, &pattern, phi_dyn.phi.ncols())?;
    physics_loss(&recon, phi_dyn)
}

/// Parameter groups held fixed during fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FreezeMask {
    pub encoder: bool,
    pub denoiser: bool,
    pub pattern_decoder: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneConfig {
    pub lambda1: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub freeze: FreezeMask,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig { lambda1: 0.1, steps: 10, learning_rate: 0.05, freeze: FreezeMask::default(), seed: 0 }
    }
}

/// Segmentation term: loss and gradient with respect to the decoded token maps.
pub type SegTerm<'a> = &'a mut dyn FnMut(&DMatrix<f64>) -> Result<(f64, DMatrix<f64>)>;

fn unpack(model: &mut ReprModel, freeze: FreezeMask, p: &[f64]) {
    let mut rest = p;
    if !freeze.encoder {
        rest = model.encoder.read_params(rest);
    }
    if !freeze.denoiser {
        rest = model.denoiser.read_params(rest);
    }
    if !freeze.pattern_decoder {
        model.pattern_decoder.read_params(rest);
    }
}

/// Minimises `L_phy + lambda1 * L_seg` over the unfrozen parameter groups.
/// Returns the tuned model and the loss trace.
pub fn fine_tune(
    model: &ReprModel,
    b: &DMatrix<f64>,
    phi_dyn: &DynamicField,
    schedule: &DiffusionSchedule,
    t_star: usize,
    cfg: &FineTuneConfig,
    mut seg: Option<SegTerm<'_>>,
) -> Result<(ReprModel, Vec<f64>)> {
    let freeze = cfg.freeze;
    let mut params = Vec::new();
    if !freeze.encoder {
        model.encoder.write_params(&mut params);
    }
    if !freeze.denoiser {
        model.denoiser.write_params(&mut params);
    }
    if !freeze.pattern_decoder {
        model.pattern_decoder.write_params(&mut params);
    }
    if params.is_empty() {
        return Ok((model.clone(), Vec::new()));
    }
    let mut objective = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut m = model.clone();
        unpack(&mut m, freeze, p);
        let ex = extraction_forward(b, &m, schedule, t_star, cfg.seed)?;
        let mut pg = stage3_loss_grad(&phi_dyn.phi, &ex.pattern, &m.pattern_decoder)?;
        if let Some(seg) = seg.as_mut() {
            let x_hat = decode_pattern(&m.pattern_decoder, &ex.pattern)?;
            let (ls, dx) = seg(&x_hat)?;
            pg.loss += cfg.lambda1 * ls;
            pg.d1.w += &dx * &ex.pattern.z_pattern * cfg.lambda1;
            pg.d1.b += row_sums(&dx) * cfg.lambda1;
            pg.z_pattern += dx.transpose() * &m.pattern_decoder.w * cfg.lambda1;
        }
        let mut grad = Vec::with_capacity(p.len());
        if !(freeze.encoder && freeze.denoiser) {
            let (ge, gd) = backprop_from(&ex, b, &m, &pg.z_pattern)?;
            if !freeze.encoder {
                ge.write_params(&mut grad);
            }
            if !freeze.denoiser {
                gd.write_params(&mut grad);
            }
        }
        if !freeze.pattern_decoder {
            pg.d1.write_params(&mut grad);
        }
        Ok((pg.loss, grad))
    };
    let mut trainer = Trainer::new(cfg.learning_rate);
    trainer.run(&mut params, &mut objective, cfg.steps)?;
    let mut tuned = model.clone();
    unpack(&mut tuned, freeze, &params);
    Ok((tuned, trainer.losses))
}
