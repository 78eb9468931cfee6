//! Markov-random-field parcellation of mesh vertices.
//!
//! Labels are 0-based in memory and 1-based in every file format and report.

mod energy;
mod maxflow;
mod vmf;

pub use energy::{
    alpha_expansion, default_sigma, edge_weights, energy_problem, normalize_rows, pairwise_weight, seg_loss, seg_loss_grad,
    total_energy, unary_matrix, EnergyProblem,
};
pub use maxflow::FlowGraph;
pub use vmf::{estimate_vmf, fit_direction, log_vmf_density, log_vmf_normalizer, unary_energy, VmfComponent};

use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelConfig {
    pub labels: Vec<usize>,
    pub k: usize,
}

impl LabelConfig {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InconsistentInput(format!("label {} outside [1, {k}]", bad + 1)));
        }
        Ok(LabelConfig { labels, k })
    }

    pub fn from_one_based(labels: &[usize], k: usize) -> Result<Self> {
        if labels.iter().any(|&l| l == 0 || l > k) {
            return Err(Error::InconsistentInput(format!("labels must lie in [1, {k}]")));
        }
        Ok(LabelConfig { labels: labels.iter().map(|l| l - 1).collect(), k })
    }

    pub fn one_based(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l + 1).collect()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.k];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub fn num_used(&self) -> usize {
        self.counts().iter().filter(|&&c| c > 0).count()
    }
}

fn default_eta() -> f64 {
    1.0
}
fn default_lambda() -> f64 {
    1.0
}
fn default_max_iters() -> usize {
    20
}
fn default_tol() -> f64 {
    1e-6
}
fn default_kappa_max() -> f64 {
    500.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParcellationParams {
    pub k: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Pairwise bandwidth; the mean edge feature distance when absent.
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_kappa_max")]
    pub kappa_max: f64,
}

impl Default for ParcellationParams {
    fn default() -> Self {
        ParcellationParams {
            k: 2,
            lambda: default_lambda(),
            eta: default_eta(),
            sigma: None,
            max_iters: default_max_iters(),
            tol: default_tol(),
            seed: 0,
            kappa_max: default_kappa_max(),
        }
    }
}

impl ParcellationParams {
    pub fn validate(&self, vertices: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InfeasibleConfig("K must be at least 1".into()));
        }
        if self.k > vertices {
            return Err(Error::KTooLarge { requested: self.k, available: vertices });
        }
        if !(self.lambda >= 0.0) || !(self.eta >= 0.0) || !(self.kappa_max > 0.0) || self.tol.is_nan() {
            return Err(Error::InfeasibleConfig("lambda and eta must be >= 0, kappa_max > 0".into()));
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0) {
                return Err(Error::InfeasibleConfig("sigma must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Moves, for each empty label in ascending order, the vertex with the largest
/// cost under its current label (ties to the lowest index) into that label.
/// Donor labels must keep at least one member. Returns whether anything moved.
pub fn repair_empty_labels(labels: &mut LabelConfig, cost: &DMatrix<f64>) -> bool {
    let mut counts = labels.counts();
    let mut changed = false;
    for empty in 0..labels.k {
        if counts[empty] > 0 {
            continue;
        }
        let mut worst: Option<(usize, f64)> = None;
        for (v, &l) in labels.labels.iter().enumerate() {
            if counts[l] < 2 {
                continue;
            }
            let c = cost[(v, l)];
            if worst.is_none_or(|(_, w)| c > w) {
                worst = Some((v, c));
            }
        }
        if let Some((v, _)) = worst {
            counts[labels.labels[v]] -= 1;
            labels.labels[v] = empty;
            counts[empty] += 1;
            changed = true;
        }
    }
    changed
}

fn cosine_costs(unit: &DMatrix<f64>, centers: &[DVector<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(unit.nrows(), centers.len(), |v, k| 1.0 - unit.row(v).transpose().dot(&centers[k]))
}

/// Spherical k-means with k-means++ seeding on row-normalised features.
pub fn init_labels(features: &DMatrix<f64>, k: usize, seed: u64) -> Result<LabelConfig> {
    let n = features.nrows();
    if k == 0 {
        return Err(Error::InfeasibleConfig("K must be at least 1".into()));
    }
    if k > n {
        return Err(Error::KTooLarge { requested: k, available: n });
    }
    let unit = normalize_rows(features)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let row = |v: usize| unit.row(v).transpose();
    let mut chosen = vec![rng.random_range(0..n)];
    while chosen.len() < k {
        let dist: Vec<f64> = (0..n)
            .map(|v| chosen.iter().map(|&c| (1.0 - row(v).dot(&row(c))).max(0.0)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = dist.iter().sum();
        let next = if total > 1e-12 {
            let mut r = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (v, d) in dist.iter().enumerate() {
                if r < *d {
                    pick = v;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            (0..n).find(|v| !chosen.contains(v)).expect("k <= n")
        };
        chosen.push(next);
    }
    let mut centers: Vec<DVector<f64>> = chosen.iter().map(|&c| row(c)).collect();
    let mut labels = LabelConfig { labels: vec![0; n], k };
    for iter in 0..100 {
        let cost = cosine_costs(&unit, &centers);
        let mut next = labels.clone();
        for v in 0..n {
            let mut best = 0;
            for c in 1..k {
                if cost[(v, c)] < cost[(v, best)] {
                    best = c;
                }
            }
            next.labels[v] = best;
        }
        repair_empty_labels(&mut next, &cost);
        if iter > 0 && next == labels {
            break;
        }
        labels = next;
        let rows: Vec<Vec<f64>> = unit.row_iter().map(|r| r.iter().cloned().collect()).collect();
        for (c, center) in centers.iter_mut().enumerate() {
            let members = labels.labels.iter().enumerate().filter(|(_, &l)| l == c).map(|(v, _)| rows[v].as_slice());
            let (mu, _) = fit_direction(members, unit.ncols(), 1.0);
            *center = mu;
        }
    }
    Ok(labels)
}

#[derive(Debug, Clone)]
pub struct Parcellation {
    pub labels: LabelConfig,
    pub energy: f64,
    /// Energy after initialisation followed by the energy after each sweep.
    pub trace: Vec<f64>,
    pub components: Vec<VmfComponent>,
    pub iterations: usize,
}

/// Alternates component re-estimation with alpha-expansion sweeps over all labels.
///
/// Components are re-estimated from a copy of the labels with empty labels
/// repaired, while the returned labels are those produced by the sweeps, so a
/// label may end up unused when smoothing dominates.
pub fn parcellate(features: &DMatrix<f64>, mesh: &TriangleMesh, params: &ParcellationParams) -> Result<Parcellation> {
    let n = mesh.num_vertices();
    if features.nrows() != n {
        return Err(Error::shape(format!("{} feature rows for {n} vertices", features.nrows())));
    }
    params.validate(n)?;
    let unit = normalize_rows(features)?;
    let positions = mesh.unit_directions();

    let mut labels = init_labels(features, params.k, params.seed)?;
    let mut comps = estimate_vmf(&labels, &unit, &positions, params.kappa_max)?;
    let mut problem = energy_problem(features, mesh, &comps, params)?;
    let mut energy = problem.energy(&labels.labels);
    let mut trace = vec![energy];
    let mut iterations = 0;
    while iterations < params.max_iters {
        iterations += 1;
        let mut cand = labels.clone();
        for alpha in 0..params.k {
            cand = alpha_expansion(&cand, alpha, &problem);
        }
        let mut est = cand.clone();
        repair_empty_labels(&mut est, &problem.unary);
        let new_comps = estimate_vmf(&est, &unit, &positions, params.kappa_max)?;
        let new_problem = energy_problem(features, mesh, &new_comps, params)?;
        let e_new = new_problem.energy(&cand.labels);
        let e_old = problem.energy(&cand.labels);
        let e = if e_new <= e_old {
            comps = new_comps;
            problem = new_problem;
            e_new
        } else {
            e_old
        };
        let improvement = energy - e;
        labels = cand;
        energy = e;
        trace.push(e);
        if !(improvement >= params.tol) {
            break;
        }
    }
    Ok(Parcellation { labels, energy, trace, components: comps, iterations })
}
