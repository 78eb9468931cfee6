use super::doctor::{network_features, VirtualDoctor};
use crate::error::{Error, Result};
use crate::linalg::upper_pairs;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Feature counts at or below this use exact subset enumeration.
pub const EXACT_LIMIT: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureAttribution {
    pub phi: Vec<f64>,
    /// Standard error of each estimate; zero under enumeration.
    pub std_error: Vec<f64>,
    pub exact: bool,
    /// Permutations drawn; zero under enumeration.
    pub n_permutations: usize,
    pub value: f64,
    pub base_value: f64,
    /// `sum(phi) - (value - base_value)`.
    pub efficiency_residual: f64,
}

/// Shapley values of `f` at `x` relative to `baseline`, where an absent
/// feature takes its baseline value.
pub fn feature_shapley(
    f: &dyn Fn(&[f64]) -> f64,
    x: &[f64],
    baseline: &[f64],
    n_permutations: usize,
    seed: u64,
) -> Result<FeatureAttribution> {
    if x.len() != baseline.len() {
        return Err(Error::LengthMismatch { left: x.len(), right: baseline.len() });
    }
    let n = x.len();
    let value = f(x);
    let base_value = f(baseline);
    let (phi, std_error, exact, perms) = if n <= EXACT_LIMIT {
        (enumerate(f, x, baseline), vec![0.0; n], true, 0)
    } else {
        let perms = n_permutations.max(1);
        let (phi, se) = sample(f, x, baseline, perms, seed);
        (phi, se, false, perms)
    };
    let efficiency_residual = phi.iter().sum::<f64>() - (value - base_value);
    Ok(FeatureAttribution { phi, std_error, exact, n_permutations: perms, value, base_value, efficiency_residual })
}

fn enumerate(f: &dyn Fn(&[f64]) -> f64, x: &[f64], baseline: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut z = baseline.to_vec();
    let values: Vec<f64> = (0..1usize << n)
        .map(|mask| {
            for i in 0..n {
                z[i] = if mask >> i & 1 == 1 { x[i] } else { baseline[i] };
            }
            f(&z)
        })
        .collect();
    // weight[s] = s! (n - s - 1)! / n!
    let mut weight = vec![0.0; n.max(1)];
    for (s, w) in weight.iter_mut().enumerate().take(n) {
        let mut v = 1.0 / n as f64;
        for k in 1..=s {
            v *= k as f64 / (n - k) as f64;
        }
        *w = v;
    }
    let mut phi = vec![0.0; n];
    for mask in 0..1usize << n {
        let size = mask.count_ones() as usize;
        for (i, p) in phi.iter_mut().enumerate() {
            if mask >> i & 1 == 0 {
                *p += weight[size] * (values[mask | 1 << i] - values[mask]);
            }
        }
    }
    phi
}

fn sample(f: &dyn Fn(&[f64]) -> f64, x: &[f64], baseline: &[f64], perms: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut mean = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    for k in 1..=perms {
        order.shuffle(&mut rng);
        let mut z = baseline.to_vec();
        let mut prev = f(&z);
        for &i in &order {
            z[i] = x[i];
            let cur = f(&z);
            let delta = cur - prev - mean[i];
            mean[i] += delta / k as f64;
            m2[i] += delta * (cur - prev - mean[i]);
            prev = cur;
        }
    }
    let se = if perms > 1 { m2.iter().map(|s| (s / (perms - 1) as f64 / perms as f64).sqrt()).collect() } else { vec![f64::INFINITY; n] };
    (mean, se)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyReport {
    pub edges: FeatureAttribution,
    /// Region score: sum of `|phi|` over incident edges.
    pub phi: Vec<f64>,
    /// Signed sum of incident edge attributions.
    pub phi_signed: Vec<f64>,
    pub baseline: Vec<f64>,
}

impl ShapleyReport {
    pub fn n_permutations(&self) -> usize {
        self.edges.n_permutations
    }
}

/// Edge attributions of the doctor's logit, aggregated to regions.
pub fn shapley_values(
    doctor: &VirtualDoctor,
    fc: &DMatrix<f64>,
    baseline: &[f64],
    n_permutations: usize,
    seed: u64,
) -> Result<ShapleyReport> {
    if fc.shape() != (doctor.regions, doctor.regions) {
        return Err(Error::shape(format!("network {:?}, doctor expects {} regions", fc.shape(), doctor.regions)));
    }
    let x = network_features(fc);
    let edges = feature_shapley(&|z| doctor.logit(z), &x, baseline, n_permutations, seed)?;
    let mut phi = vec![0.0; doctor.regions];
    let mut phi_signed = vec![0.0; doctor.regions];
    for ((i, j), &e) in upper_pairs(doctor.regions).into_iter().zip(&edges.phi) {
        for r in [i, j] {
            phi[r] += e.abs();
            phi_signed[r] += e;
        }
    }
    Ok(ShapleyReport { edges, phi, phi_signed, baseline: baseline.to_vec() })
}

/// The `k` regions with the largest score, lowest index first among ties;
/// returned in ascending order.
pub fn select_targets(phi: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > phi.len() {
        return Err(Error::KTooLarge { requested: k, available: phi.len() });
    }
    if k == 0 {
        return Err(Error::InconsistentInput("at least one target is required".into()));
    }
    let mut idx: Vec<usize> = (0..phi.len()).collect();
    idx.sort_by(|&a, &b| phi[b].total_cmp(&phi[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}
