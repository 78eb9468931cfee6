//! End-to-end orchestration: personalised and baseline networks per session,
//! reports with provenance, and the experiment harnesses.

mod experiments;

pub use experiments::{
    run_consistency, run_e2e, run_modulation, ConsistencyConfig, ConsistencyResult, E2eConfig, E2eResult, ModulationConfig,
    ModulationResult,
};

use crate::connectome::{pearson_fc, personalized_fc, region_timeseries, AttentionParams, FunctionalNetwork};
use crate::error::{Error, Result};
use crate::graph::Binarization;
use crate::mesh::{build_laplacian, compute_eigenmodes, EigenmodeBasis, TriangleMesh};
use crate::parcel::{
    default_sigma, energy_problem, normalize_rows, parcellate, repair_empty_labels, seg_loss_grad, LabelConfig, ParcellationParams,
};
use crate::repr::{
    decode_pattern, extract_pattern, fine_tune, pretrain, BoldMatrix, FineTuneConfig, PatternRepresentation, PretrainTrace, ReprConfig,
};
use crate::wave::{fit_constrained_amplitudes, reconstruct_field, WaveParams};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub d_k: usize,
    pub cross_scale: f64,
    pub seed: u64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig { d_k: 8, cross_scale: 0.1, seed: 0 }
    }
}

/// Parameters of the personalised network pipeline for one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub repr: ReprConfig,
    pub fine_tune: FineTuneConfig,
    pub wave: WaveParams,
    pub modes: usize,
    pub parcellation: ParcellationParams,
    pub attention: AttentionConfig,
    pub tau: f64,
    pub binarization: Binarization,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            repr: ReprConfig::default(),
            fine_tune: FineTuneConfig::default(),
            wave: WaveParams { r_s: 0.15, ..WaveParams::default() },
            modes: 30,
            parcellation: ParcellationParams { k: 8, ..ParcellationParams::default() },
            attention: AttentionConfig::default(),
            tau: 0.3,
            binarization: Binarization::Absolute,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self, vertices: usize) -> Result<()> {
        if self.modes == 0 || self.modes > vertices {
            return Err(Error::InfeasibleConfig(format!("{} modes for {vertices} vertices", self.modes)));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::InfeasibleConfig(format!("threshold {}", self.tau)));
        }
        self.wave.validate()?;
        self.parcellation.validate(vertices)
    }

    pub fn basis(&self, mesh: &TriangleMesh) -> Result<EigenmodeBasis> {
        compute_eigenmodes(&build_laplacian(mesh)?, self.modes, self.repr.seed)
    }
}

#[derive(Debug, Clone)]
pub struct PersonalizedNetwork {
    pub labels: LabelConfig,
    pub network: FunctionalNetwork,
    pub pattern: PatternRepresentation,
    pub features: DMatrix<f64>,
    pub energy_trace: Vec<f64>,
    pub pretrain: PretrainTrace,
    pub fine_tune_losses: Vec<f64>,
}

/// Parcellation of `features`, with unused labels filled by their best-fitting donors.
fn repaired_parcellation(features: &DMatrix<f64>, mesh: &TriangleMesh, params: &ParcellationParams) -> Result<(LabelConfig, Vec<f64>, Vec<crate::parcel::VmfComponent>)> {
    let parc = parcellate(features, mesh, params)?;
    let mut labels = parc.labels;
    let cost = energy_problem(features, mesh, &parc.components, params)?.unary;
    repair_empty_labels(&mut labels, &cost);
    Ok((labels, parc.trace, parc.components))
}

/// Representation pre-training, physics and segmentation fine-tuning,
/// parcellation of the decoded pattern, then the attention network.
pub fn personalized_network(bold: &BoldMatrix, mesh: &TriangleMesh, basis: &EigenmodeBasis, cfg: &PipelineConfig) -> Result<PersonalizedNetwork> {
    let b = bold.standardized().data;
    let schedule = cfg.repr.schedule()?;
    let t_star = cfg.repr.t_star();
    let (model, pretrain_trace) = pretrain(&b, &cfg.repr, true)?;

    let fit = fit_constrained_amplitudes(&b, basis, &cfg.wave)?;
    let phi = reconstruct_field(&fit.amplitudes, basis)?;

    let pattern0 = extract_pattern(&b, &model, &schedule, t_star, cfg.fine_tune.seed)?;
    let x0 = decode_pattern(&model.pattern_decoder, &pattern0)?;
    let (labels0, _, comps0) = repaired_parcellation(&x0, mesh, &cfg.parcellation)?;
    let mut seg_params = cfg.parcellation.clone();
    seg_params.sigma = Some(cfg.parcellation.sigma.unwrap_or_else(|| normalize_rows(&x0).map(|u| default_sigma(&u, &mesh.edges())).unwrap_or(1.0)));
    let mut seg = |x: &DMatrix<f64>| seg_loss_grad(&labels0, x, mesh, &comps0, &seg_params);
    let (tuned, fine_tune_losses) = fine_tune(&model, &b, &phi, &schedule, t_star, &cfg.fine_tune, Some(&mut seg))?;

    let pattern = extract_pattern(&b, &tuned, &schedule, t_star, cfg.fine_tune.seed)?;
    let features = decode_pattern(&tuned.pattern_decoder, &pattern)?;
    let (labels, energy_trace, _) = repaired_parcellation(&features, mesh, &cfg.parcellation)?;
    let h = region_timeseries(&b, &labels)?.h;
    let att = AttentionParams::similarity(b.ncols(), cfg.repr.latent_dim, cfg.attention.d_k, cfg.attention.cross_scale, cfg.attention.seed);
    let network = personalized_fc(&h, &pattern, &att)?;
    Ok(PersonalizedNetwork { labels, network, pattern, features, energy_trace, pretrain: pretrain_trace, fine_tune_losses })
}

/// Fixed-atlas Pearson network.
pub fn baseline_network(bold: &BoldMatrix, atlas: &LabelConfig) -> Result<FunctionalNetwork> {
    let b = bold.standardized().data;
    pearson_fc(&region_timeseries(&b, atlas)?.h)
}

/// SHA-256 of the compact JSON form.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    let text = serde_json::to_string(cfg)?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Report envelope written next to every artifact set.
#[derive(Debug, Clone, Serialize)]
pub struct Report<T: Serialize> {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub resolved_config: serde_json::Value,
    pub results: T,
}

impl<T: Serialize> Report<T> {
    pub fn new<C: Serialize>(command: &str, cfg: &C, seeds: BTreeMap<String, u64>, results: T) -> Result<Self> {
        Ok(Report {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash(cfg)?,
            seeds,
            resolved_config: serde_json::to_value(cfg)?,
            results,
        })
    }
}

/// Runs `f` on a dedicated pool of `threads` workers (rayon's default when `None`).
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
