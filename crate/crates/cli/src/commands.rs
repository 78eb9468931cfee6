use crate::Common;
use nalgebra::DMatrix;
use neurodyn::connectome::{covariance_fc, partial_corr_fc, pearson_fc, region_timeseries, Estimator, FunctionalNetwork};
use neurodyn::graph::{
    abnormal_circuit, char_path_length, circuit_cosine_similarity, clustering_coefficient, global_efficiency, parse_tau_range,
    portrait_divergence, tau_sweep, threshold_matrix, top_k_edges, Binarization,
};
use neurodyn::io::{decode_csv, encode_off, read_binary, read_labels, write_atomic, write_binary, write_csv, write_json, write_labels};
use neurodyn::mesh::{build_laplacian, compute_eigenmodes, residuals, EigenmodeBasis, TriangleMesh};
use neurodyn::modulation::{DISORDER, HEALTHY};
use neurodyn::parcel::{parcellate as run_parcellation, LabelConfig, ParcellationParams};
use neurodyn::pipeline::{run_consistency, run_e2e, run_modulation, ConsistencyConfig, E2eConfig, ModulationConfig, Report};
use neurodyn::repr::{decode_pattern, extract_pattern, pretrain, Affine, BoldMatrix, ReprConfig};
use neurodyn::synth::{synth_generate, SynthConfig};
use neurodyn::wave::{fit_constrained_amplitudes, reconstruct_field, WaveParams};
use neurodyn::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

/// Surface source: a generated icosphere or an OFF file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MeshSource {
    Icosphere(usize),
    Off(PathBuf),
}

impl Default for MeshSource {
    fn default() -> Self {
        MeshSource::Icosphere(3)
    }
}

impl MeshSource {
    fn load(&self) -> Result<TriangleMesh> {
        match self {
            MeshSource::Icosphere(n) => Ok(TriangleMesh::icosphere(*n)),
            MeshSource::Off(path) => neurodyn::io::read_off(path),
        }
    }
}

fn load_config<C: DeserializeOwned + Default>(common: &Common) -> Result<C> {
    let Some(path) = &common.config else { return Ok(C::default()) };
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| Error::Config(format!("missing `{key}`")))
}

/// Binary matrix, or CSV when the extension says so (header detected from the first line).
fn load_matrix(path: &Path) -> Result<DMatrix<f64>> {
    if !path.is_file() {
        return Err(Error::parse(path.display().to_string(), "no such file"));
    }
    if !path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        return read_binary(path);
    }
    let text = fs::read_to_string(path)?;
    let header = text.lines().next().is_some_and(|l| l.split(',').any(|f| f.trim().parse::<f64>().is_err()));
    decode_csv(&text, header)
}

fn load_labels(path: &Path) -> Result<LabelConfig> {
    if !path.is_file() {
        return Err(Error::parse(path.display().to_string(), "no such file"));
    }
    let labels = read_labels(path)?;
    let k = labels.iter().copied().max().unwrap_or(0);
    LabelConfig::from_one_based(&labels, k)
}

/// Every `seed` / `*_seed` integer in the resolved configuration, keyed by its dotted path.
fn collect_seeds(value: &Value) -> BTreeMap<String, u64> {
    fn walk(v: &Value, prefix: &str, out: &mut BTreeMap<String, u64>) {
        if let Value::Object(map) = v {
            for (key, child) in map {
                let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
                match child.as_u64() {
                    Some(s) if key == "seed" || key.ends_with("_seed") => {
                        out.insert(path, s);
                    }
                    _ => walk(child, &path, out),
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(value, "", &mut out);
    out
}

fn write_report<C: Serialize, T: Serialize>(dir: &Path, command: &str, cfg: &C, results: T) -> Result<()> {
    let seeds = collect_seeds(&serde_json::to_value(cfg)?);
    write_json(&dir.join("report.json"), &Report::new(command, cfg, seeds, results)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn basis_for(mesh: &TriangleMesh, modes: usize, seed: u64) -> Result<EigenmodeBasis> {
    compute_eigenmodes(&build_laplacian(mesh)?, modes, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EigenmodesConfig {
    pub mesh: MeshSource,
    pub modes: usize,
    pub seed: u64,
}

impl Default for EigenmodesConfig {
    fn default() -> Self {
        EigenmodesConfig { mesh: MeshSource::default(), modes: 64, seed: 0 }
    }
}

pub fn eigenmodes(common: &Common, dir: &Path) -> Result<()> {
    let mut cfg: EigenmodesConfig = load_config(common)?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    let mesh = cfg.mesh.load()?;
    let lap = build_laplacian(&mesh)?;
    let basis = compute_eigenmodes(&lap, cfg.modes, cfg.seed)?;
    let res = residuals(&lap, &basis);
    write_binary(&dir.join("modes.ndbf"), &basis.modes)?;
    write_binary(&dir.join("mass.ndbf"), &DMatrix::from_column_slice(basis.mass.len(), 1, basis.mass.as_slice()))?;
    let eig = DMatrix::from_column_slice(basis.eigenvalues.len(), 1, basis.eigenvalues.as_slice());
    write_csv(&dir.join("eigenvalues.csv"), &eig, Some(&["eigenvalue".to_string()]))?;
    let results = json!({
        "vertices": mesh.num_vertices(),
        "modes": basis.num_modes(),
        "eigenvalues": basis.eigenvalues.as_slice(),
        "max_residual": res.iter().copied().fold(0.0, f64::max),
    });
    write_report(dir, "eigenmodes", &cfg, results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitDynamicsConfig {
    pub mesh: MeshSource,
    /// Vertex-by-time BOLD matrix.
    pub bold: Option<PathBuf>,
    pub standardize: bool,
    pub modes: usize,
    pub wave: WaveParams,
    /// Eigensolver seed.
    pub seed: u64,
}

impl Default for FitDynamicsConfig {
    fn default() -> Self {
        FitDynamicsConfig {
            mesh: MeshSource::default(),
            bold: None,
            standardize: true,
            modes: 64,
            wave: WaveParams { r_s: 0.15, ..WaveParams::default() },
            seed: 0,
        }
    }
}

fn load_bold(path: &Path, tr: f64, standardize: bool) -> Result<DMatrix<f64>> {
    let bold = BoldMatrix::new(load_matrix(path)?, tr)?;
    Ok(if standardize { bold.standardized().data } else { bold.data })
}

pub fn fit_dynamics(common: &Common, dir: &Path) -> Result<()> {
    let mut cfg: FitDynamicsConfig = load_config(common)?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    let mesh = cfg.mesh.load()?;
    let b = load_bold(required(&cfg.bold, "bold")?, cfg.wave.dt, cfg.standardize)?;
    let basis = basis_for(&mesh, cfg.modes, cfg.seed)?;
    let fit = fit_constrained_amplitudes(&b, &basis, &cfg.wave)?;
    let field = reconstruct_field(&fit.amplitudes, &basis)?;
    write_binary(&dir.join("amplitudes.ndbf"), &fit.amplitudes.a)?;
    write_binary(&dir.join("field.ndbf"), &field.phi)?;
    let results = json!({
        "objective": fit.objective,
        "data_misfit": fit.data_misfit,
        "constraint_residual": fit.constraint_residual,
        "normal_residual": fit.normal_residual,
    });
    write_report(dir, "fit-dynamics", &cfg, results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainReprConfig {
    pub bold: Option<PathBuf>,
    pub tr: f64,
    pub standardize: bool,
    pub warm_start: bool,
    pub repr: ReprConfig,
}

impl Default for TrainReprConfig {
    fn default() -> Self {
        TrainReprConfig { bold: None, tr: 0.72, standardize: true, warm_start: true, repr: ReprConfig::default() }
    }
}

fn write_affine(dir: &Path, name: &str, a: &Affine, files: &mut Vec<String>) -> Result<()> {
    for (suffix, m) in [("w", a.w.clone()), ("b", DMatrix::from_column_slice(a.b.len(), 1, a.b.as_slice()))] {
        let file = format!("{name}_{suffix}.ndbf");
        write_binary(&dir.join(&file), &m)?;
        files.push(file);
    }
    Ok(())
}

pub fn train_repr(common: &Common, dir: &Path) -> Result<()> {
    let mut cfg: TrainReprConfig = load_config(common)?;
    cfg.repr.seed = common.seed.unwrap_or(cfg.repr.seed);
    let b = load_bold(required(&cfg.bold, "bold")?, cfg.tr, cfg.standardize)?;
    let (model, trace) = pretrain(&b, &cfg.repr, cfg.warm_start)?;
    let pattern = extract_pattern(&b, &model, &cfg.repr.schedule()?, cfg.repr.t_star(), cfg.repr.seed)?;
    let features = decode_pattern(&model.pattern_decoder, &pattern)?;
    write_binary(&dir.join("pattern.ndbf"), &pattern.z_pattern)?;
    write_binary(&dir.join("features.ndbf"), &features)?;

    let ckpt = dir.join("checkpoint");
    fs::create_dir_all(&ckpt)?;
    let mut files = Vec::new();
    write_affine(&ckpt, "encoder", &model.encoder, &mut files)?;
    write_affine(&ckpt, "decoder", &model.decoder, &mut files)?;
    write_affine(&ckpt, "pattern_decoder", &model.pattern_decoder, &mut files)?;
    let d = &model.denoiser;
    let vector = |v: &nalgebra::DVector<f64>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    for (name, m) in [
        ("denoiser_w_in", d.w_in.clone()),
        ("denoiser_w_time", d.w_time.clone()),
        ("denoiser_b_hidden", vector(&d.b_hidden)),
        ("denoiser_w_out", d.w_out.clone()),
        ("denoiser_b_out", vector(&d.b_out)),
    ] {
        let file = format!("{name}.ndbf");
        write_binary(&ckpt.join(&file), &m)?;
        files.push(file);
    }
    let manifest = json!({
        "vertices": model.vertices(),
        "latent_dim": model.latent_dim(),
        "activation": model.activation,
        "denoiser_activation": d.activation,
        "t_star": pattern.t_star,
        "files": files,
    });
    write_json(&ckpt.join("manifest.json"), &manifest)?;

    let last = |v: &[f64]| v.last().copied();
    let results = json!({
        "tokens": pattern.tokens(),
        "t_star": pattern.t_star,
        "final_loss": { "stage1": last(&trace.stage1), "stage2": last(&trace.stage2), "stage3": last(&trace.stage3) },
        "trace": { "stage1": trace.stage1, "stage2": trace.stage2, "stage3": trace.stage3 },
    });
    write_report(dir, "train-repr", &cfg, results)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParcellateConfig {
    pub mesh: MeshSource,
    /// Vertex-by-feature matrix.
    pub features: Option<PathBuf>,
    pub parcellation: ParcellationParams,
}

pub fn parcellate(common: &Common, dir: &Path) -> Result<()> {
    let mut cfg: ParcellateConfig = load_config(common)?;
    cfg.parcellation.seed = common.seed.unwrap_or(cfg.parcellation.seed);
    let mesh = cfg.mesh.load()?;
    let features = load_matrix(required(&cfg.features, "features")?)?;
    let parc = run_parcellation(&features, &mesh, &cfg.parcellation)?;
    write_labels(&dir.join("labels.csv"), &parc.labels.one_based())?;
    let results = json!({
        "energy": parc.energy,
        "iterations": parc.iterations,
        "trace": parc.trace,
        "counts": parc.labels.counts(),
        "labels_used": parc.labels.num_used(),
    });
    write_report(dir, "parcellate", &cfg, results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConnectomeConfig {
    pub bold: Option<PathBuf>,
    /// 1-based vertex labels.
    pub labels: Option<PathBuf>,
    pub tr: f64,
    pub standardize: bool,
    pub estimator: Estimator,
    /// Precision ridge for partial correlation; chosen automatically when absent.
    pub ridge: Option<f64>,
}

impl Default for ConnectomeConfig {
    fn default() -> Self {
        ConnectomeConfig { bold: None, labels: None, tr: 0.72, standardize: true, estimator: Estimator::Pearson, ridge: None }
    }
}

pub fn connectome(common: &Common, dir: &Path) -> Result<()> {
    let cfg: ConnectomeConfig = load_config(common)?;
    let b = load_bold(required(&cfg.bold, "bold")?, cfg.tr, cfg.standardize)?;
    let labels = load_labels(required(&cfg.labels, "labels")?)?;
    let h = region_timeseries(&b, &labels)?.h;
    let net = match cfg.estimator {
        Estimator::Pearson => pearson_fc(&h)?,
        Estimator::Partial => partial_corr_fc(&h, cfg.ridge)?,
        Estimator::Covariance => covariance_fc(&h)?,
        Estimator::Personalized => {
            return Err(Error::Config("personalized networks need the full pipeline (e2e)".into()));
        }
    };
    write_binary(&dir.join("region_series.ndbf"), &h)?;
    write_binary(&dir.join("fc.ndbf"), &net.fc)?;
    write_csv(&dir.join("fc.csv"), &net.fc, None)?;
    let results = json!({
        "estimator": net.estimator,
        "regions": net.regions(),
        "zero_variance_rows": net.zero_variance_rows.iter().map(|r| r + 1).collect::<Vec<_>>(),
    });
    write_report(dir, "connectome", &cfg, results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub fc: Option<PathBuf>,
    pub tau: f64,
    pub binarization: Binarization,
    /// Second network for a portrait divergence.
    pub compare: Option<PathBuf>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { fc: None, tau: 0.3, binarization: Binarization::Absolute, compare: None }
    }
}

fn edge_list(edges: &[(usize, usize)]) -> String {
    let mut text = String::from("source,target\n");
    for (a, b) in edges {
        text.push_str(&format!("{},{}\n", a + 1, b + 1));
    }
    text
}

pub fn metrics(common: &Common, sweep: Option<&str>, dir: &Path) -> Result<()> {
    let cfg: MetricsConfig = load_config(common)?;
    let fc = load_matrix(required(&cfg.fc, "fc")?)?;
    if fc.nrows() != fc.ncols() {
        return Err(Error::shape(format!("network must be square, got {}x{}", fc.nrows(), fc.ncols())));
    }
    let taus = sweep.map(parse_tau_range).transpose().map_err(|e| Error::Config(format!("--tau-sweep: {e}")))?;
    let g = threshold_matrix(&fc, cfg.tau, cfg.binarization);
    write_text(&dir.join("edges.csv"), &edge_list(&g.edges()))?;
    let pdiv = match &cfg.compare {
        Some(path) => Some(portrait_divergence(&g, &threshold_matrix(&load_matrix(path)?, cfg.tau, cfg.binarization))),
        None => None,
    };
    let rows = taus.map(|t| tau_sweep(&fc, &t, cfg.binarization));
    if let Some(rows) = &rows {
        let table = DMatrix::from_fn(rows.len(), 4, |i, j| [rows[i].tau, rows[i].cpl, rows[i].clustering, rows[i].efficiency][j]);
        let header: Vec<String> = ["tau", "cpl", "clustering", "efficiency"].iter().map(|s| s.to_string()).collect();
        write_csv(&dir.join("sweep.csv"), &table, Some(&header))?;
    }
    let results = json!({
        "nodes": g.num_nodes(),
        "edges": g.num_edges(),
        "cpl": char_path_length(&g),
        "clustering": clustering_coefficient(&g),
        "efficiency": global_efficiency(&g),
        "portrait_divergence": pdiv,
        "sweep": rows,
    });
    write_report(dir, "metrics", &cfg, results)
}

pub fn modulate(common: &Common, dir: &Path) -> Result<()> {
    let mut cfg: ModulationConfig = load_config(common)?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    let res = run_modulation(&cfg)?;
    write_json(&dir.join("shapley.json"), &res.shapley)?;
    write_binary(&dir.join("trajectory_pre.ndbf"), &res.example_trajectories.0)?;
    write_binary(&dir.join("trajectory_post.ndbf"), &res.example_trajectories.1)?;
    write_report(dir, "modulate", &cfg, &res)
}

pub fn consistency(common: &Common, dir: &Path) -> Result<()> {
    let mut cfg: ConsistencyConfig = load_config(common)?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    let res = run_consistency(&cfg)?;
    let n = res.within.len();
    let table = DMatrix::from_fn(n, 3, |i, j| [(i + 1) as f64, res.within[i], res.baseline_within[i]][j]);
    let header: Vec<String> = ["subject", "personalized", "baseline"].iter().map(|s| s.to_string()).collect();
    write_csv(&dir.join("within.csv"), &table, Some(&header))?;
    write_report(dir, "consistency", &cfg, &res)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AbnormalConfig {
    /// Network files of the first group; the synthetic cohort is used when both lists are empty.
    pub group_a: Vec<PathBuf>,
    pub group_b: Vec<PathBuf>,
    pub synth: SynthConfig,
    pub k: usize,
    pub seed: u64,
}

impl Default for AbnormalConfig {
    fn default() -> Self {
        AbnormalConfig {
            group_a: Vec::new(),
            group_b: Vec::new(),
            synth: SynthConfig { subjects: 20, disorder_subjects: 10, sessions: 1, ..SynthConfig::default() },
            k: 10,
            seed: 0,
        }
    }
}

fn as_network(fc: DMatrix<f64>) -> FunctionalNetwork {
    FunctionalNetwork { fc, estimator: Estimator::Pearson, zero_variance_rows: Vec::new() }
}

pub fn abnormal(common: &Common, dir: &Path) -> Result<()> {
    let mut cfg: AbnormalConfig = load_config(common)?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    let (circuit, planted) = if cfg.group_a.is_empty() && cfg.group_b.is_empty() {
        let data = synth_generate(&cfg.synth, cfg.seed)?;
        let group = |class: usize| -> Result<(Vec<FunctionalNetwork>, Vec<FunctionalNetwork>)> {
            let members = data.subjects.iter().filter(|s| s.class == class);
            let observed = members.clone().map(|s| pearson_fc(&s.region_series[0])).collect::<Result<_>>()?;
            let truth = members.map(|s| as_network(s.planted_fc.clone())).collect();
            Ok((observed, truth))
        };
        let (a, a_truth) = group(DISORDER)?;
        let (b, b_truth) = group(HEALTHY)?;
        (abnormal_circuit(&a, &b)?, Some(abnormal_circuit(&a_truth, &b_truth)?))
    } else {
        let load = |paths: &[PathBuf]| paths.iter().map(|p| load_matrix(p).map(as_network)).collect::<Result<Vec<_>>>();
        (abnormal_circuit(&load(&cfg.group_a)?, &load(&cfg.group_b)?)?, None)
    };
    let top = top_k_edges(&circuit, cfg.k)?;
    let mut text = String::from("source,target,weight\n");
    for (i, j, w) in &top {
        text.push_str(&format!("{},{},{w}\n", i + 1, j + 1));
    }
    write_text(&dir.join("top_edges.csv"), &text)?;
    write_binary(&dir.join("circuit.ndbf"), &circuit)?;
    let similarity = planted.as_ref().map(|p| circuit_cosine_similarity(&circuit, p)).transpose()?;
    let results = json!({
        "top_edges": top.iter().map(|(i, j, w)| json!({ "source": i + 1, "target": j + 1, "weight": w })).collect::<Vec<_>>(),
        "planted_similarity": similarity,
    });
    write_report(dir, "abnormal", &cfg, results)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthCommandConfig {
    pub synth: SynthConfig,
    pub seed: u64,
}

pub fn synth(common: &Common, dir: &Path) -> Result<()> {
    let mut cfg: SynthCommandConfig = load_config(common)?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    let data = synth_generate(&cfg.synth, cfg.seed)?;
    write_text(&dir.join("mesh.off"), &encode_off(&data.mesh))?;
    write_labels(&dir.join("atlas_labels.csv"), &data.truth.one_based())?;
    write_binary(&dir.join("planted_fc.ndbf"), &data.planted_fc)?;
    let mut subjects = Vec::new();
    for (s, subj) in data.subjects.iter().enumerate() {
        let key = format!("subject{}", s + 1);
        write_labels(&dir.join(format!("{key}_labels.csv")), &subj.labels.one_based())?;
        write_binary(&dir.join(format!("{key}_planted_fc.ndbf")), &subj.planted_fc)?;
        for (k, (bold, series)) in subj.sessions.iter().zip(&subj.region_series).enumerate() {
            write_binary(&dir.join(format!("{key}_session{}_bold.ndbf", k + 1)), &bold.data)?;
            write_binary(&dir.join(format!("{key}_session{}_regions.ndbf", k + 1)), series)?;
        }
        let class = if subj.class == DISORDER { "disorder" } else { "healthy" };
        subjects.push(json!({ "subject": s + 1, "class": class, "networks": subj.networks.iter().map(|n| n + 1).collect::<Vec<_>>() }));
    }
    let results = json!({
        "vertices": data.mesh.num_vertices(),
        "regions": data.truth.k,
        "subjects": subjects,
    });
    write_report(dir, "synth", &cfg, results)
}

pub fn e2e(common: &Common, dir: &Path) -> Result<()> {
    let mut cfg: E2eConfig = load_config(common)?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    let res = run_e2e(&cfg, dir)?;
    write_report(dir, "e2e", &cfg, &res)
}
