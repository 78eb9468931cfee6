//! Deterministic synthetic cohorts on an icosphere.
//!
//! Each subject owns a network assignment of its regions, a symmetric VAR(1)
//! coupling built from it, and a parcellation obtained by jittering the group
//! seeds. Sessions share everything subject-level and differ in their draws.

use crate::error::{Error, Result};
use crate::mesh::{build_laplacian, compute_eigenmodes, TriangleMesh};
use crate::modulation::{DISORDER, HEALTHY};
use crate::parcel::LabelConfig;
use crate::repr::BoldMatrix;
use crate::wave::{reconstruct_field, simulate_modes, DriveField, WaveParams};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

const MAX_SPECTRAL_RADIUS: f64 = 0.97;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub subdivisions: usize,
    pub regions: usize,
    pub networks: usize,
    pub subjects: usize,
    /// The last `disorder_subjects` subjects belong to the disorder class.
    pub disorder_subjects: usize,
    pub sessions: usize,
    pub timepoints: usize,
    pub tr: f64,
    /// Eigenvalue of the coupling orthogonal to network means.
    pub self_coupling: f64,
    /// Eigenvalue of the coupling along each network mean.
    pub network_coupling: f64,
    /// 0-based regions sharing an extra hub coupling.
    pub abnormal_regions: Vec<usize>,
    pub hub_coupling: f64,
    /// Factor on the inputs that abnormal regions receive from outside the
    /// abnormal set in disorder subjects. Their outgoing coupling is unchanged.
    pub disorder_afferent: f64,
    /// Probability that a subject moves a region to a random network.
    pub reassign_prob: f64,
    /// Random-walk hops applied to each group seed per subject.
    pub jitter_hops: usize,
    /// Weight of the wave-smoothed field in the vertex signal.
    pub smoothing: f64,
    pub smoothing_modes: usize,
    pub wave: WaveParams,
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            subdivisions: 2,
            regions: 8,
            networks: 3,
            subjects: 4,
            disorder_subjects: 0,
            sessions: 2,
            timepoints: 200,
            tr: 0.72,
            self_coupling: 0.5,
            network_coupling: 0.8,
            abnormal_regions: vec![0, 1, 2],
            hub_coupling: 0.25,
            disorder_afferent: 0.0,
            reassign_prob: 0.3,
            jitter_hops: 1,
            smoothing: 0.2,
            smoothing_modes: 30,
            wave: WaveParams { r_s: 0.15, ..WaveParams::default() },
            noise_std: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleConfig(m));
        let v = 10 * 4usize.pow(self.subdivisions as u32) + 2;
        if self.regions == 0 || self.regions > v {
            return bad(format!("{} regions on a {v}-vertex mesh", self.regions));
        }
        if self.networks == 0 || self.networks > self.regions {
            return bad(format!("{} networks for {} regions", self.networks, self.regions));
        }
        if self.subjects == 0 || self.sessions == 0 || self.disorder_subjects > self.subjects {
            return bad(format!("{} subjects, {} disorder, {} sessions", self.subjects, self.disorder_subjects, self.sessions));
        }
        if self.timepoints < 4 {
            return bad(format!("{} time points", self.timepoints));
        }
        if let Some(r) = self.abnormal_regions.iter().find(|&&r| r >= self.regions) {
            return bad(format!("abnormal region {r} outside {} regions", self.regions));
        }
        let coupling_ok = [self.self_coupling, self.network_coupling].iter().all(|c| c.abs() < 1.0) && self.hub_coupling.is_finite();
        if !coupling_ok || !(0.0..=1.0).contains(&self.disorder_afferent) {
            return bad("couplings must lie in (-1, 1) and the afferent factor in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.reassign_prob) || !(0.0..=1.0).contains(&self.smoothing) || !(self.noise_std >= 0.0) {
            return bad("probabilities and weights must lie in [0, 1], noise must be non-negative".into());
        }
        if self.smoothing > 0.0 && (self.smoothing_modes == 0 || self.smoothing_modes > v) {
            return bad(format!("{} smoothing modes on {v} vertices", self.smoothing_modes));
        }
        self.wave.validate().map_err(|e| Error::InfeasibleConfig(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub class: usize,
    pub networks: Vec<usize>,
    pub labels: LabelConfig,
    pub coupling: DMatrix<f64>,
    pub planted_fc: DMatrix<f64>,
    /// Latent region series per session (regions x T).
    pub region_series: Vec<DMatrix<f64>>,
    pub sessions: Vec<BoldMatrix>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub mesh: TriangleMesh,
    /// Group atlas: Voronoi cells of the unjittered seeds.
    pub truth: LabelConfig,
    pub seeds: Vec<usize>,
    /// Stationary correlation of the template healthy coupling.
    /// Subjects differ from it through network reassignment and class.
    pub planted_fc: DMatrix<f64>,
    pub subjects: Vec<Subject>,
}

/// `A = a I + sum_g (rho - a) P_g`, plus `delta P_S` when a hub set is given,
/// where `P_g` projects onto the mean of group `g`. Rescaled if needed so the
/// spectral radius stays below one.
pub fn coupling_matrix(networks: &[usize], self_coupling: f64, network_coupling: f64, hub: Option<(&[usize], f64)>) -> DMatrix<f64> {
    let n = networks.len();
    let mut a = DMatrix::identity(n, n) * self_coupling;
    let groups = networks.iter().max().map_or(0, |g| g + 1);
    let mut add_projection = |members: &[usize], w: f64| {
        let size = members.len() as f64;
        for &i in members {
            for &j in members {
                a[(i, j)] += w / size;
            }
        }
    };
    for g in 0..groups {
        let members: Vec<usize> = (0..n).filter(|&i| networks[i] == g).collect();
        if !members.is_empty() {
            add_projection(&members, network_coupling - self_coupling);
        }
    }
    if let Some((set, delta)) = hub {
        if !set.is_empty() {
            add_projection(set, delta);
        }
    }
    let radius = a.clone().symmetric_eigenvalues().amax();
    if radius > MAX_SPECTRAL_RADIUS {
        a *= MAX_SPECTRAL_RADIUS / radius;
    }
    a
}

/// Scales the inputs that `regions` receive from regions outside the set by `factor`.
pub fn weaken_afferents(a: &DMatrix<f64>, regions: &[usize], factor: f64) -> DMatrix<f64> {
    let mut out = a.clone();
    for &r in regions {
        for j in (0..a.ncols()).filter(|j| !regions.contains(j)) {
            out[(r, j)] *= factor;
        }
    }
    out
}

/// Stationary covariance of `x_t = A x_{t-1} + eta_t` with unit innovations.
pub fn stationary_covariance(a: &DMatrix<f64>) -> DMatrix<f64> {
    lyapunov(a, &DMatrix::identity(a.nrows(), a.nrows()))
}

/// Solution of `S = A S A^T + Q` for a stable `A`, by the doubling recursion
/// `S <- S + A_k S A_k^T`, `A_k <- A_k^2`.
pub fn lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = q.clone();
    let mut ak = a.clone();
    for _ in 0..64 {
        let step = &ak * &s * ak.transpose();
        s += &step;
        ak = &ak * &ak;
        if step.amax() <= 1e-15 * s.amax() {
            break;
        }
    }
    s
}

pub fn covariance_to_correlation(s: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(s.nrows(), s.ncols(), |i, j| if i == j { 1.0 } else { s[(i, j)] / (s[(i, i)] * s[(j, j)]).sqrt() })
}

/// Stationary VAR(1) path with unit innovations, started from the stationary law.
pub fn simulate_var1(a: &DMatrix<f64>, timepoints: usize, seed: u64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let chol = stationary_covariance(a).cholesky().ok_or(Error::SingularCovariance)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |len: usize| DVector::from_iterator(len, (0..len).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
    let mut x = chol.l() * normal(n);
    let mut out = DMatrix::zeros(n, timepoints);
    for t in 0..timepoints {
        if t > 0 {
            x = a * &x + normal(n);
        }
        out.set_column(t, &x);
    }
    Ok(out)
}

/// Farthest-point seeds, starting from a seeded random vertex.
pub fn spread_seeds(mesh: &TriangleMesh, k: usize, seed: u64) -> Vec<usize> {
    let verts = mesh.vertices();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seeds = vec![rng.random_range(0..verts.len())];
    let mut dist: Vec<f64> = verts.iter().map(|v| (v - verts[seeds[0]]).norm()).collect();
    while seeds.len() < k {
        let next = (0..verts.len()).max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a))).expect("non-empty mesh");
        seeds.push(next);
        for (d, v) in dist.iter_mut().zip(verts) {
            *d = d.min((v - verts[next]).norm());
        }
    }
    seeds
}

fn jitter_seeds(neighbors: &[Vec<usize>], seeds: &[usize], hops: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = seeds.to_vec();
    for i in 0..out.len() {
        let mut v = out[i];
        for _ in 0..hops {
            let nb = &neighbors[v];
            v = nb[rng.random_range(0..nb.len())];
        }
        if !out.contains(&v) {
            out[i] = v;
        }
    }
    out
}

pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mesh = TriangleMesh::icosphere(cfg.subdivisions);
    let neighbors = mesh.neighbors();
    let seeds = spread_seeds(&mesh, cfg.regions, seed);
    let truth = LabelConfig::new(mesh.geodesic_voronoi(&seeds), cfg.regions)?;
    let template: Vec<usize> = (0..cfg.regions).map(|i| i % cfg.networks).collect();
    let template_coupling = coupling_matrix(&template, cfg.self_coupling, cfg.network_coupling, Some((&cfg.abnormal_regions, cfg.hub_coupling)));
    let planted_fc = covariance_to_correlation(&stationary_covariance(&template_coupling));
    let basis = if cfg.smoothing > 0.0 { Some(compute_eigenmodes(&build_laplacian(&mesh)?, cfg.smoothing_modes, seed)?) } else { None };

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    let mut subjects = Vec::with_capacity(cfg.subjects);
    for s in 0..cfg.subjects {
        let class = if s >= cfg.subjects - cfg.disorder_subjects { DISORDER } else { HEALTHY };
        let networks: Vec<usize> = template
            .iter()
            .map(|&g| if rng.random_bool(cfg.reassign_prob) { rng.random_range(0..cfg.networks) } else { g })
            .collect();
        let mut coupling = coupling_matrix(&networks, cfg.self_coupling, cfg.network_coupling, Some((&cfg.abnormal_regions, cfg.hub_coupling)));
        if class == DISORDER {
            coupling = weaken_afferents(&coupling, &cfg.abnormal_regions, cfg.disorder_afferent);
        }
        let planted = covariance_to_correlation(&stationary_covariance(&coupling));
        let subject_seeds = jitter_seeds(&neighbors, &seeds, cfg.jitter_hops, &mut rng);
        let labels = LabelConfig::new(mesh.geodesic_voronoi(&subject_seeds), cfg.regions)?;

        let mut region_series = Vec::with_capacity(cfg.sessions);
        let mut sessions = Vec::with_capacity(cfg.sessions);
        for _ in 0..cfg.sessions {
            let session_seed: u64 = rng.random();
            let latent = simulate_var1(&coupling, cfg.timepoints, session_seed)?;
            let piecewise = DMatrix::from_fn(mesh.num_vertices(), cfg.timepoints, |v, t| latent[(labels.labels[v], t)]);
            let mut signal = match &basis {
                Some(basis) => {
                    let zero = DVector::zeros(basis.num_modes());
                    let amps = simulate_modes(&cfg.wave, basis, &DriveField::Explicit(piecewise.clone()), &zero, &zero)?;
                    let smooth = reconstruct_field(&amps, basis)?.phi;
                    piecewise * (1.0 - cfg.smoothing) + smooth * cfg.smoothing
                }
                None => piecewise,
            };
            let mut noise_rng = ChaCha8Rng::seed_from_u64(session_seed.wrapping_add(1));
            for v in signal.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut noise_rng);
                *v += cfg.noise_std * e;
            }
            region_series.push(latent);
            sessions.push(BoldMatrix::new(signal, cfg.tr)?);
        }
        subjects.push(Subject { class, networks, labels, coupling, planted_fc: planted, region_series, sessions });
    }
    Ok(SyntheticDataset { mesh, truth, seeds, planted_fc, subjects })
}
