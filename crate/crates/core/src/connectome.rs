//! Region time series, attention-based network estimation and the classical estimators.

use crate::error::{Error, Result};
use crate::linalg::softmax_rows;
use crate::parcel::LabelConfig;
use crate::repr::PatternRepresentation;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Region-mean signals, K x T.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionTimeSeries {
    pub h: DMatrix<f64>,
    pub sizes: Vec<usize>,
}

pub fn region_timeseries(b: &DMatrix<f64>, labels: &LabelConfig) -> Result<RegionTimeSeries> {
    if labels.labels.len() != b.nrows() {
        return Err(Error::LengthMismatch { left: labels.labels.len(), right: b.nrows() });
    }
    let mut h = DMatrix::zeros(labels.k, b.ncols());
    let mut sizes = vec![0usize; labels.k];
    for (v, &l) in labels.labels.iter().enumerate() {
        let mut row = h.row_mut(l);
        row += b.row(v);
        sizes[l] += 1;
    }
    for (k, &n) in sizes.iter().enumerate() {
        if n == 0 {
            return Err(Error::EmptyRegion(k + 1));
        }
        let mut row = h.row_mut(k);
        row /= n as f64;
    }
    Ok(RegionTimeSeries { h, sizes })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttentionForm {
    /// `Softmax(Q K^T / sqrt(d_k)) V`.
    #[default]
    Standard,
    /// `Softmax(Q K^T V / sqrt(d_k))`, the value product taken inside the softmax.
    Literal,
}

/// Projections for the region self-attention (`w_q`, `w_k`: T x d_k, `w_v`: T x d_v)
/// and the cross-attention onto pattern tokens (`w_qc`: d_v x d_k, `w_kc`: d x d_k, `w_vc`: d x d_v).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
    pub w_qc: DMatrix<f64>,
    pub w_kc: DMatrix<f64>,
    pub w_vc: DMatrix<f64>,
    pub form: AttentionForm,
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = Normal::new(0.0, std).expect("finite std");
    DMatrix::from_fn(rows, cols, |_, _| n.sample(rng))
}

impl AttentionParams {
    /// Independent Gaussian projections scaled by `1/sqrt(fan_in)`.
    pub fn random(t: usize, latent: usize, d_k: usize, d_v: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let st = 1.0 / (t.max(1) as f64).sqrt();
        let sd = 1.0 / (latent.max(1) as f64).sqrt();
        AttentionParams {
            w_q: gaussian(t, d_k, st, &mut rng),
            w_k: gaussian(t, d_k, st, &mut rng),
            w_v: gaussian(t, d_v, st, &mut rng),
            w_qc: gaussian(d_v, d_k, 1.0 / (d_v.max(1) as f64).sqrt(), &mut rng),
            w_kc: gaussian(latent, d_k, sd, &mut rng),
            w_vc: gaussian(latent, d_v, sd, &mut rng),
            form: AttentionForm::Standard,
        }
    }

    /// Similarity attention: tied query/key projection, identity values
    /// (`d_v = T`) and a cross-attention value map damped by `cross_scale`.
    pub fn similarity(t: usize, latent: usize, d_k: usize, cross_scale: f64, seed: u64) -> Self {
        let mut p = Self::random(t, latent, d_k, t, seed);
        p.w_k = p.w_q.clone();
        p.w_v = DMatrix::identity(t, t);
        p.w_vc *= cross_scale;
        p
    }

    pub fn d_k(&self) -> usize {
        self.w_q.ncols()
    }

    pub fn d_v(&self) -> usize {
        self.w_v.ncols()
    }

    fn check(&self) -> Result<()> {
        let (t, dk, dv) = (self.w_q.nrows(), self.d_k(), self.d_v());
        let ok = dk >= 1
            && self.w_k.shape() == (t, dk)
            && self.w_v.nrows() == t
            && self.w_qc.shape() == (dv, dk)
            && self.w_kc.ncols() == dk
            && self.w_vc.shape() == (self.w_kc.nrows(), dv);
        if ok {
            Ok(())
        } else {
            Err(Error::shape("attention projections have inconsistent shapes"))
        }
    }
}

/// Attention weights together with the attended output.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub weights: DMatrix<f64>,
    pub out: DMatrix<f64>,
}

fn attend(q: &DMatrix<f64>, k: &DMatrix<f64>, v: &DMatrix<f64>, form: AttentionForm) -> AttentionOutput {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let scores = q * k.transpose() * scale;
    match form {
        AttentionForm::Standard => {
            let weights = softmax_rows(&scores);
            let out = &weights * v;
            AttentionOutput { weights, out }
        }
        AttentionForm::Literal => {
            let out = softmax_rows(&(q * k.transpose() * v * scale));
            AttentionOutput { weights: softmax_rows(&scores), out }
        }
    }
}

/// Self-attention across regions: `Q = H W_q`, `K = H W_k`, `V = H W_v`.
pub fn self_attention(h: &DMatrix<f64>, p: &AttentionParams) -> Result<AttentionOutput> {
    p.check()?;
    if h.ncols() != p.w_q.nrows() {
        return Err(Error::shape(format!("attention expects {} time points, got {}", p.w_q.nrows(), h.ncols())));
    }
    Ok(attend(&(h * &p.w_q), &(h * &p.w_k), &(h * &p.w_v), p.form))
}

/// Cross-attention with region queries `H_intra W_qc` over pattern tokens
/// (keys `Z W_kc`, values `Z W_vc`).
pub fn cross_attention(h_intra: &DMatrix<f64>, pattern: &PatternRepresentation, p: &AttentionParams) -> Result<AttentionOutput> {
    p.check()?;
    if h_intra.ncols() != p.w_qc.nrows() {
        return Err(Error::shape(format!("cross-attention expects width {}, got {}", p.w_qc.nrows(), h_intra.ncols())));
    }
    let z = &pattern.z_pattern;
    if z.ncols() != p.w_kc.nrows() {
        return Err(Error::shape(format!("pattern width {} vs key projection {}", z.ncols(), p.w_kc.nrows())));
    }
    Ok(attend(&(h_intra * &p.w_qc), &(z * &p.w_kc), &(z * &p.w_vc), p.form))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Personalized,
    Pearson,
    Partial,
    Covariance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalNetwork {
    pub fc: DMatrix<f64>,
    pub estimator: Estimator,
    /// Rows whose variance vanished and were given zero off-diagonal entries.
    pub zero_variance_rows: Vec<usize>,
}

impl FunctionalNetwork {
    pub fn regions(&self) -> usize {
        self.fc.nrows()
    }
}

/// Pearson correlation between rows computed from the row-standardised matrix.
fn row_correlation(x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<usize>) {
    let (k, n) = x.shape();
    let mut z = x.clone();
    let mut flat = Vec::new();
    for (i, mut row) in z.row_iter_mut().enumerate() {
        let mean = row.sum() / n as f64;
        row.add_scalar_mut(-mean);
        let norm = row.norm();
        // relative threshold so rounding noise on a constant row counts as zero variance
        let scale = x.row(i).amax().max(1e-300);
        if norm <= 1e-12 * scale * (n as f64).sqrt() || norm == 0.0 {
            row.fill(0.0);
            flat.push(i);
        } else {
            row /= norm;
        }
    }
    let mut c = &z * z.transpose();
    for i in 0..k {
        for j in 0..k {
            c[(i, j)] = if i == j { 1.0 } else { c[(i, j)].clamp(-1.0, 1.0) };
        }
    }
    // exact symmetry
    for i in 0..k {
        for j in (i + 1)..k {
            let m = 0.5 * (c[(i, j)] + c[(j, i)]);
            c[(i, j)] = m;
            c[(j, i)] = m;
        }
    }
    (c, flat)
}

/// Correlation coefficients between the rows of the attended features.
pub fn correlation_network(features: &DMatrix<f64>) -> FunctionalNetwork {
    let (fc, flat) = row_correlation(features);
    FunctionalNetwork { fc, estimator: Estimator::Personalized, zero_variance_rows: flat }
}

pub fn pearson_fc(h: &DMatrix<f64>) -> Result<FunctionalNetwork> {
    if h.ncols() < 2 {
        return Err(Error::TooShortSeries(h.ncols()));
    }
    let (fc, flat) = row_correlation(h);
    Ok(FunctionalNetwork { fc, estimator: Estimator::Pearson, zero_variance_rows: flat })
}

fn sample_covariance(h: &DMatrix<f64>) -> DMatrix<f64> {
    let n = h.ncols();
    let mut c = h.clone();
    for mut row in c.row_iter_mut() {
        let m = row.sum() / n as f64;
        row.add_scalar_mut(-m);
    }
    let denom = (n.max(2) - 1) as f64;
    &c * c.transpose() / denom
}

pub fn covariance_fc(h: &DMatrix<f64>) -> Result<FunctionalNetwork> {
    if h.ncols() < 2 {
        return Err(Error::TooShortSeries(h.ncols()));
    }
    Ok(FunctionalNetwork { fc: sample_covariance(h), estimator: Estimator::Covariance, zero_variance_rows: Vec::new() })
}

/// Partial correlations `-P_ij / sqrt(P_ii P_jj)` of the precision `P = (S + ridge I)^-1`.
pub fn partial_corr_from_covariance(s: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    let k = s.nrows();
    let reg = s + DMatrix::identity(k, k) * ridge;
    let chol = reg.cholesky().ok_or(Error::SingularCovariance)?;
    let l_diag_min = (0..k).map(|i| chol.l_dirty()[(i, i)]).fold(f64::INFINITY, f64::min);
    let l_diag_max = (0..k).map(|i| chol.l_dirty()[(i, i)]).fold(0.0, f64::max);
    if !(l_diag_min > 1e-8 * l_diag_max) {
        return Err(Error::SingularCovariance);
    }
    let p = chol.inverse();
    let mut r = DMatrix::identity(k, k);
    for i in 0..k {
        for j in (i + 1)..k {
            let v = (-p[(i, j)] / (p[(i, i)] * p[(j, j)]).sqrt()).clamp(-1.0, 1.0);
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    Ok(r)
}

/// Partial-correlation network; `ridge = None` uses `1e-3 trace(S) / K`.
pub fn partial_corr_fc(h: &DMatrix<f64>, ridge: Option<f64>) -> Result<FunctionalNetwork> {
    if h.ncols() < 2 {
        return Err(Error::TooShortSeries(h.ncols()));
    }
    let s = sample_covariance(h);
    let ridge = ridge.unwrap_or_else(|| 1e-3 * s.trace() / s.nrows() as f64);
    let fc = partial_corr_from_covariance(&s, ridge)?;
    Ok(FunctionalNetwork { fc, estimator: Estimator::Partial, zero_variance_rows: Vec::new() })
}

/// Rows shifted to zero mean and unit variance; constant rows become zero.
pub fn standardize_rows(h: &DMatrix<f64>) -> DMatrix<f64> {
    let n = h.ncols() as f64;
    let mut z = h.clone();
    for mut row in z.row_iter_mut() {
        let m = row.sum() / n;
        row.add_scalar_mut(-m);
        let sd = (row.norm_squared() / n).sqrt();
        if sd > 1e-300 {
            row /= sd;
        }
    }
    z
}

/// Attention-based personalised network: self-attention over standardised
/// region series, cross-attention onto the pattern tokens, residual fusion
/// `H_intra + H_cross` and row correlation of the fused features.
pub fn personalized_fc(h: &DMatrix<f64>, pattern: &PatternRepresentation, p: &AttentionParams) -> Result<FunctionalNetwork> {
    let z = standardize_rows(h);
    let intra = self_attention(&z, p)?;
    let cross = cross_attention(&intra.out, pattern, p)?;
    Ok(correlation_network(&(intra.out + cross.out)))
}
