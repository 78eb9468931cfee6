use super::LabelConfig;
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use std::f64::consts::PI;

const UNIT_TOL: f64 = 1e-6;
const SERIES_LIMIT: f64 = 50.0;

/// Functional and spatial von Mises-Fisher parameters of one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmfComponent {
    pub mu_f: DVector<f64>,
    pub kappa_f: f64,
    pub mu_s: Vector3<f64>,
    pub kappa_s: f64,
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// `ln I_nu(x)` by the power series.
pub(crate) fn log_bessel_i_series(nu: f64, x: f64) -> f64 {
    let lx = (x / 2.0).ln();
    let mut terms = Vec::new();
    let mut m = 0usize;
    loop {
        let mf = m as f64;
        let t = (2.0 * mf + nu) * lx - ln_gamma(mf + 1.0) - ln_gamma(mf + nu + 1.0);
        terms.push(t);
        // terms peak near m ~ x/2 and then fall off geometrically
        if mf > x && t < terms[0].max(terms[terms.len() / 2]) - 40.0 {
            break;
        }
        m += 1;
        if m > 10_000 {
            break;
        }
    }
    log_sum_exp(&terms)
}

/// `ln I_nu(x)` by the large-argument expansion.
pub(crate) fn log_bessel_i_asymptotic(nu: f64, x: f64) -> f64 {
    let mu = 4.0 * nu * nu;
    let mut sum = 1.0;
    let mut term = 1.0;
    for k in 1..30 {
        let kf = k as f64;
        let next = -term * (mu - (2.0 * kf - 1.0).powi(2)) / (kf * 8.0 * x);
        if next.abs() > term.abs() {
            break;
        }
        term = next;
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    x - 0.5 * (2.0 * PI * x).ln() + sum.ln()
}

/// `ln C_p(kappa)`, the log-normaliser of the vMF density on the unit sphere in R^p.
pub fn log_vmf_normalizer(p: usize, kappa: f64) -> f64 {
    let half = p as f64 / 2.0;
    if kappa <= 0.0 {
        // reciprocal surface area of the sphere
        return ln_gamma(half) - (2.0f64.ln() + half * PI.ln());
    }
    let nu = half - 1.0;
    let log_i = if kappa < SERIES_LIMIT { log_bessel_i_series(nu, kappa) } else { log_bessel_i_asymptotic(nu, kappa) };
    nu * kappa.ln() - half * (2.0 * PI).ln() - log_i
}

/// Log-density of the vMF distribution at unit vector `x`.
pub fn log_vmf_density(x: &[f64], mu: &[f64], kappa: f64) -> f64 {
    let dot: f64 = x.iter().zip(mu).map(|(a, b)| a * b).sum();
    log_vmf_normalizer(x.len(), kappa) + kappa * dot
}

fn check_unit(v: &[f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::NonUnitInput(n));
    }
    Ok(())
}

/// `-ln vMF(f; mu_f, kappa_f) - eta ln vMF(s; mu_s, kappa_s)`.
pub fn unary_energy(feature: &DVector<f64>, position: &Vector3<f64>, comp: &VmfComponent, eta: f64) -> Result<f64> {
    check_unit(feature.as_slice())?;
    check_unit(position.as_slice())?;
    if feature.len() != comp.mu_f.len() {
        return Err(Error::LengthMismatch { left: feature.len(), right: comp.mu_f.len() });
    }
    Ok(-log_vmf_density(feature.as_slice(), comp.mu_f.as_slice(), comp.kappa_f)
        - eta * log_vmf_density(position.as_slice(), comp.mu_s.as_slice(), comp.kappa_s))
}

/// Mean direction and Banerjee concentration of a set of unit vectors.
/// A vanishing resultant maps to the first basis direction.
pub fn fit_direction<'a, I>(vectors: I, dim: usize, kappa_max: f64) -> (DVector<f64>, f64)
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut sum: DVector<f64> = DVector::zeros(dim);
    let mut n = 0usize;
    for v in vectors {
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
        n += 1;
    }
    let norm = sum.norm();
    if n == 0 || norm < 1e-12 {
        let mut e1 = DVector::zeros(dim);
        e1[0] = 1.0;
        return (e1, 0.0);
    }
    let r = (norm / n as f64).min(1.0);
    let p = dim as f64;
    let kappa = if r >= 1.0 - 1e-12 { kappa_max } else { (r * (p - r * r) / (1.0 - r * r)).clamp(0.0, kappa_max) };
    (sum / norm, kappa)
}

/// Re-estimates one component per label from row-normalised features and unit positions.
pub fn estimate_vmf(
    labels: &LabelConfig,
    features: &DMatrix<f64>,
    positions: &[Vector3<f64>],
    kappa_max: f64,
) -> Result<Vec<VmfComponent>> {
    let v = labels.labels.len();
    if features.nrows() != v || positions.len() != v {
        return Err(Error::shape(format!("{v} labels, {} feature rows, {} positions", features.nrows(), positions.len())));
    }
    let mut members = vec![Vec::new(); labels.k];
    for (i, &l) in labels.labels.iter().enumerate() {
        members[l].push(i);
    }
    let rows: Vec<Vec<f64>> = features.row_iter().map(|r| r.iter().cloned().collect()).collect();
    let mut comps = Vec::with_capacity(labels.k);
    for (label, idx) in members.iter().enumerate() {
        if idx.is_empty() {
            return Err(Error::EmptyLabel(label + 1));
        }
        let (mu_f, kappa_f) = fit_direction(idx.iter().map(|&i| rows[i].as_slice()), features.ncols(), kappa_max);
        let (mu_s, kappa_s) = fit_direction(idx.iter().map(|&i| positions[i].as_slice()), 3, kappa_max);
        comps.push(VmfComponent { mu_f, kappa_f, mu_s: Vector3::new(mu_s[0], mu_s[1], mu_s[2]), kappa_s });
    }
    Ok(comps)
}
