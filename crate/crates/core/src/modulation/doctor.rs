use crate::error::{Error, Result};
use crate::linalg::{pearson, upper_triangle};
use crate::repr::Trainer;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const HEALTHY: usize = 0;
pub const DISORDER: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DoctorConfig {
    pub ridge: f64,
    pub steps: usize,
    pub learning_rate: f64,
    /// Disorder probability at or above which a network is diagnosed as disordered.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for DoctorConfig {
    fn default() -> Self {
        DoctorConfig { ridge: 1e-3, steps: 300, learning_rate: 1.0, threshold: 0.5, seed: 0 }
    }
}

/// Logistic classifier on the vectorized upper triangle of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualDoctor {
    pub regions: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub threshold: f64,
    pub ridge: f64,
    pub seed: u64,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnosis {
    pub class: usize,
    pub p_disorder: f64,
}

impl Diagnosis {
    pub fn probability(&self, class: usize) -> f64 {
        if class == DISORDER {
            self.p_disorder
        } else {
            1.0 - self.p_disorder
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy plus `ridge/2 |w|^2`; `params` is `[w..., b]`.
pub fn logistic_loss_grad(params: &[f64], features: &[Vec<f64>], labels: &[usize], ridge: f64) -> (f64, Vec<f64>) {
    let d = params.len() - 1;
    let (w, b) = (&params[..d], params[d]);
    let n = features.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; d + 1];
    for (x, &y) in features.iter().zip(labels) {
        let z = b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
        let yf = (y == DISORDER) as u8 as f64;
        loss += softplus(z) - yf * z;
        let r = (sigmoid(z) - yf) / n;
        for (g, c) in grad.iter_mut().zip(x) {
            *g += r * c;
        }
        grad[d] += r;
    }
    loss /= n;
    for (g, wi) in grad.iter_mut().zip(w) {
        *g += ridge * wi;
    }
    loss += 0.5 * ridge * w.iter().map(|v| v * v).sum::<f64>();
    (loss, grad)
}

pub fn network_features(fc: &DMatrix<f64>) -> Vec<f64> {
    upper_triangle(fc)
}

pub fn train_classifier(fcs: &[DMatrix<f64>], labels: &[usize], cfg: &DoctorConfig) -> Result<VirtualDoctor> {
    if fcs.len() != labels.len() {
        return Err(Error::LengthMismatch { left: fcs.len(), right: labels.len() });
    }
    let first = fcs.first().ok_or(Error::EmptyList)?;
    let regions = first.nrows();
    if let Some(&bad) = labels.iter().find(|&&l| l != HEALTHY && l != DISORDER) {
        return Err(Error::InconsistentInput(format!("class label {bad} is not 0 or 1")));
    }
    if !(labels.contains(&HEALTHY) && labels.contains(&DISORDER)) {
        return Err(Error::SingleClass);
    }
    let mut features = Vec::with_capacity(fcs.len());
    for fc in fcs {
        if fc.shape() != (regions, regions) {
            return Err(Error::shape(format!("network {:?}, expected {regions}x{regions}", fc.shape())));
        }
        features.push(network_features(fc));
    }
    let dim = regions * regions.saturating_sub(1) / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, 1e-3).expect("valid std");
    let mut params: Vec<f64> = (0..dim).map(|_| init.sample(&mut rng)).collect();
    params.push(0.0);
    let mut objective = |p: &[f64]| Ok(logistic_loss_grad(p, &features, labels, cfg.ridge));
    let mut trainer = Trainer::new(cfg.learning_rate);
    trainer.run(&mut params, &mut objective, cfg.steps)?;
    let bias = params.pop().expect("bias present");
    Ok(VirtualDoctor { regions, weights: params, bias, threshold: cfg.threshold, ridge: cfg.ridge, seed: cfg.seed, losses: trainer.losses })
}

impl VirtualDoctor {
    pub fn logit(&self, features: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(features).map(|(w, x)| w * x).sum::<f64>()
    }

    pub fn diagnose_features(&self, features: &[f64]) -> Diagnosis {
        let p = sigmoid(self.logit(features));
        let class = if p >= self.threshold { DISORDER } else { HEALTHY };
        Diagnosis { class, p_disorder: p }
    }
}

pub fn classify(doctor: &VirtualDoctor, fc: &DMatrix<f64>) -> Result<Diagnosis> {
    if fc.shape() != (doctor.regions, doctor.regions) {
        return Err(Error::shape(format!("network {:?}, doctor expects {} regions", fc.shape(), doctor.regions)));
    }
    Ok(doctor.diagnose_features(&network_features(fc)))
}

/// Fraction of networks diagnosed healthy.
pub fn recovery_rate(doctor: &VirtualDoctor, post_fcs: &[DMatrix<f64>]) -> Result<f64> {
    if post_fcs.is_empty() {
        return Err(Error::EmptyList);
    }
    let mut healthy = 0usize;
    for fc in post_fcs {
        if classify(doctor, fc)?.class == HEALTHY {
            healthy += 1;
        }
    }
    Ok(healthy as f64 / post_fcs.len() as f64)
}

fn group_mean_features(group: &[DMatrix<f64>]) -> Result<Vec<f64>> {
    let first = group.first().ok_or(Error::EmptyGroup)?;
    let mut acc = vec![0.0; network_features(first).len()];
    for fc in group {
        if fc.shape() != first.shape() {
            return Err(Error::shape(format!("network {:?} vs {:?}", fc.shape(), first.shape())));
        }
        for (a, v) in acc.iter_mut().zip(network_features(fc)) {
            *a += v;
        }
    }
    let n = group.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Pearson correlation of the patient group-mean network with the healthy
/// group-mean network, before and after modulation.
pub fn fc_shift_correlation(pre: &[DMatrix<f64>], post: &[DMatrix<f64>], healthy: &[DMatrix<f64>]) -> Result<(f64, f64)> {
    let h = group_mean_features(healthy)?;
    let a = group_mean_features(pre)?;
    let b = group_mean_features(post)?;
    if a.len() != h.len() || b.len() != h.len() {
        return Err(Error::LengthMismatch { left: a.len().max(b.len()), right: h.len() });
    }
    let flat = || Error::InconsistentInput("group-mean network has no variance across edges".into());
    Ok((pearson(&a, &h).ok_or_else(flat)?, pearson(&b, &h).ok_or_else(flat)?))
}
