use super::{baseline_network, personalized_network, PipelineConfig};
use crate::connectome::{pearson_fc, FunctionalNetwork};
use crate::error::{Error, Result};
use crate::graph::{portrait_divergence, threshold_graph, BinaryGraph};
use crate::io::{write_binary, write_labels};
use crate::linalg::median;
use crate::modulation::{
    fc_shift_correlation, network_features, perturbed_rollout, recovery_rate, rollout, select_targets, shapley_values,
    train_classifier, train_dynamics_multi, DoctorConfig, DynamicsConfig, PerturbationSpec, ShapleyReport, DISORDER, HEALTHY, LAGS,
};
use crate::synth::{synth_generate, SynthConfig, SyntheticDataset};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

struct SessionNetworks {
    personalized: BinaryGraph,
    baseline: BinaryGraph,
    personalized_fc: FunctionalNetwork,
    baseline_fc: FunctionalNetwork,
    labels: Vec<usize>,
}

fn session_networks(data: &SyntheticDataset, cfg: &PipelineConfig) -> Result<Vec<Vec<SessionNetworks>>> {
    cfg.validate(data.mesh.num_vertices())?;
    let basis = cfg.basis(&data.mesh)?;
    let jobs: Vec<(usize, usize)> =
        data.subjects.iter().enumerate().flat_map(|(s, subj)| (0..subj.sessions.len()).map(move |k| (s, k))).collect();
    let flat: Vec<SessionNetworks> = jobs
        .par_iter()
        .map(|&(s, k)| -> Result<SessionNetworks> {
            let bold = &data.subjects[s].sessions[k];
            let pers = personalized_network(bold, &data.mesh, &basis, cfg)?;
            let base = baseline_network(bold, &data.truth)?;
            Ok(SessionNetworks {
                personalized: threshold_graph(&pers.network, cfg.tau, cfg.binarization),
                baseline: threshold_graph(&base, cfg.tau, cfg.binarization),
                personalized_fc: pers.network,
                baseline_fc: base,
                labels: pers.labels.one_based(),
            })
        })
        .collect::<Result<_>>()?;
    let mut out: Vec<Vec<SessionNetworks>> = data.subjects.iter().map(|_| Vec::new()).collect();
    for (net, &(s, _)) in flat.into_iter().zip(&jobs) {
        out[s].push(net);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencyConfig {
    pub synth: SynthConfig,
    pub pipeline: PipelineConfig,
    pub seed: u64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        let synth = SynthConfig { subjects: 20, sessions: 2, self_coupling: 0.3, network_coupling: 0.9, ..SynthConfig::default() };
        ConsistencyConfig { synth, pipeline: PipelineConfig::default(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyResult {
    /// `1 - PDiv` between the two sessions of each subject (personalised).
    pub within: Vec<f64>,
    /// Same for the fixed-atlas Pearson baseline.
    pub baseline_within: Vec<f64>,
    /// `1 - PDiv` between first sessions of every subject pair (personalised).
    pub between: Vec<f64>,
    pub median_within: f64,
    pub median_between: f64,
    pub median_baseline_within: f64,
    /// Fraction of subjects whose personalised within-subject PDiv is at most the baseline's.
    pub personalized_not_worse: f64,
}

pub fn run_consistency(cfg: &ConsistencyConfig) -> Result<ConsistencyResult> {
    if cfg.synth.sessions < 2 {
        return Err(Error::InfeasibleConfig("consistency needs two sessions per subject".into()));
    }
    let data = synth_generate(&cfg.synth, cfg.seed)?;
    let nets = session_networks(&data, &cfg.pipeline)?;
    let within: Vec<f64> = nets.iter().map(|s| 1.0 - portrait_divergence(&s[0].personalized, &s[1].personalized)).collect();
    let baseline_within: Vec<f64> = nets.iter().map(|s| 1.0 - portrait_divergence(&s[0].baseline, &s[1].baseline)).collect();
    let mut between = Vec::new();
    for i in 0..nets.len() {
        for j in (i + 1)..nets.len() {
            between.push(1.0 - portrait_divergence(&nets[i][0].personalized, &nets[j][0].personalized));
        }
    }
    let not_worse = within.iter().zip(&baseline_within).filter(|(p, b)| p >= b).count() as f64 / within.len() as f64;
    Ok(ConsistencyResult {
        median_within: median(&within),
        median_between: if between.is_empty() { f64::NAN } else { median(&between) },
        median_baseline_within: median(&baseline_within),
        personalized_not_worse: not_worse,
        within,
        baseline_within,
        between,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct E2eConfig {
    pub synth: SynthConfig,
    pub pipeline: PipelineConfig,
    pub seed: u64,
}

impl Default for E2eConfig {
    fn default() -> Self {
        E2eConfig { synth: SynthConfig { subjects: 2, sessions: 2, ..SynthConfig::default() }, pipeline: PipelineConfig::default(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct E2eResult {
    /// Artifact file names, relative to the output directory.
    pub artifacts: Vec<String>,
    /// Session keys in `subject{i}_session{j}` form, 1-based.
    pub sessions: Vec<String>,
    /// Pairwise PDiv of the personalised networks, in session order.
    pub pdiv: Vec<Vec<f64>>,
    pub baseline_pdiv: Vec<Vec<f64>>,
}

/// Synthesises a cohort, builds personalised and baseline networks for every
/// session, writes them with the labels, and returns the PDiv tables.
pub fn run_e2e(cfg: &E2eConfig, out_dir: &Path) -> Result<E2eResult> {
    let data = synth_generate(&cfg.synth, cfg.seed)?;
    let nets = session_networks(&data, &cfg.pipeline)?;
    let mut artifacts = Vec::new();
    let mut sessions = Vec::new();
    let mut flat = Vec::new();
    for (s, subj) in nets.iter().enumerate() {
        for (k, net) in subj.iter().enumerate() {
            let key = format!("subject{}_session{}", s + 1, k + 1);
            for (suffix, m) in [("fc.ndbf", &net.personalized_fc.fc), ("baseline_fc.ndbf", &net.baseline_fc.fc)] {
                let name = format!("{key}_{suffix}");
                write_binary(&out_dir.join(&name), m)?;
                artifacts.push(name);
            }
            let name = format!("{key}_labels.csv");
            write_labels(&out_dir.join(&name), &net.labels)?;
            artifacts.push(name);
            sessions.push(key);
            flat.push(net);
        }
    }
    let table = |pick: fn(&SessionNetworks) -> &BinaryGraph| -> Vec<Vec<f64>> {
        flat.iter().map(|a| flat.iter().map(|b| portrait_divergence(pick(a), pick(b))).collect()).collect()
    };
    Ok(E2eResult { artifacts, sessions, pdiv: table(|n| &n.personalized), baseline_pdiv: table(|n| &n.baseline) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModulationConfig {
    pub synth: SynthConfig,
    pub dynamics: DynamicsConfig,
    pub doctor: DoctorConfig,
    /// Number of regions to perturb.
    pub k: usize,
    /// Explicit 1-based targets; Shapley selection is used when absent.
    pub targets: Option<Vec<usize>>,
    pub delta: f64,
    /// Rollout length; the session length when absent.
    pub steps: Option<usize>,
    pub n_permutations: usize,
    pub seed: u64,
}

impl Default for ModulationConfig {
    fn default() -> Self {
        ModulationConfig {
            synth: SynthConfig { subjects: 80, disorder_subjects: 40, sessions: 2, smoothing: 0.0, ..SynthConfig::default() },
            dynamics: DynamicsConfig { hidden: 8, epochs: 100, ..DynamicsConfig::default() },
            doctor: DoctorConfig { ridge: 0.1, ..DoctorConfig::default() },
            k: 3,
            targets: None,
            delta: 1.2,
            steps: None,
            n_permutations: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModulationResult {
    /// 1-based.
    pub targets: Vec<usize>,
    /// 1-based, size-matched random draw.
    pub random_targets: Vec<usize>,
    pub recovery_pre: f64,
    pub recovery_targeted: f64,
    pub recovery_random: f64,
    pub r_pre: f64,
    pub r_post: f64,
    pub r_post_random: f64,
    pub shapley: ShapleyReport,
    /// Rollouts of the first patient without and with the targeted perturbation.
    #[serde(skip)]
    pub example_trajectories: (DMatrix<f64>, DMatrix<f64>),
}

fn fc_of(series: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(pearson_fc(series)?.fc)
}

/// Trains the doctor on first-session region networks, selects targets from
/// the Shapley attribution of the mean patient network against the healthy
/// mean, and rolls out each patient's fitted dynamics with and without
/// perturbation (common random numbers across the three rollouts).
pub fn run_modulation(cfg: &ModulationConfig) -> Result<ModulationResult> {
    let data = synth_generate(&cfg.synth, cfg.seed)?;
    let regions = cfg.synth.regions;
    let fcs: Vec<DMatrix<f64>> = data.subjects.iter().map(|s| fc_of(&s.region_series[0])).collect::<Result<_>>()?;
    let classes: Vec<usize> = data.subjects.iter().map(|s| s.class).collect();
    let doctor = train_classifier(&fcs, &classes, &cfg.doctor)?;

    let pick = |class: usize| -> Vec<usize> { (0..classes.len()).filter(|&i| classes[i] == class).collect() };
    let (healthy, patients) = (pick(HEALTHY), pick(DISORDER));
    let mean_features = |idx: &[usize]| -> Vec<f64> {
        let mut acc = vec![0.0; regions * (regions - 1) / 2];
        for &i in idx {
            for (a, v) in acc.iter_mut().zip(network_features(&fcs[i])) {
                *a += v / idx.len() as f64;
            }
        }
        acc
    };
    let baseline = mean_features(&healthy);
    let patient_mean = crate::linalg::from_upper_triangle(regions, &mean_features(&patients), 1.0);
    let shapley = shapley_values(&doctor, &patient_mean, &baseline, cfg.n_permutations, cfg.seed)?;
    let targets = match &cfg.targets {
        Some(t) => t.iter().map(|&r| r.checked_sub(1).ok_or(Error::TargetOutOfRange { target: 0, regions })).collect::<Result<Vec<_>>>()?,
        None => select_targets(&shapley.phi, cfg.k)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a12_9e37);
    let mut random_targets = rand::seq::index::sample(&mut rng, regions, targets.len()).into_vec();
    random_targets.sort_unstable();

    type PatientOut = (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, Option<(DMatrix<f64>, DMatrix<f64>)>);
    let per_patient: Vec<PatientOut> = patients
        .par_iter()
        .enumerate()
        .map(|(p, &i)| -> Result<_> {
            let subj = &data.subjects[i];
            let (model, _) = train_dynamics_multi(&subj.region_series, &cfg.dynamics)?;
            let init = subj.region_series[0].columns(0, LAGS).into_owned();
            let steps = cfg.steps.unwrap_or(cfg.synth.timepoints);
            let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(p as u64);
            let spec = |t: &[usize]| PerturbationSpec { targets: t.to_vec(), delta: cfg.delta, seed: seed ^ 0xdead_beef };
            let pre = rollout(&model, &init, steps, model.noise_std, seed)?;
            let post = perturbed_rollout(&model, &init, steps, model.noise_std, seed, &spec(&targets))?;
            let rand_post = perturbed_rollout(&model, &init, steps, model.noise_std, seed, &spec(&random_targets))?;
            let (pre_fc, post_fc) = (fc_of(&pre)?, fc_of(&post)?);
            let example = (p == 0).then_some((pre, post));
            Ok((pre_fc, post_fc, fc_of(&rand_post)?, example))
        })
        .collect::<Result<_>>()?;
    let pre: Vec<_> = per_patient.iter().map(|t| t.0.clone()).collect();
    let post: Vec<_> = per_patient.iter().map(|t| t.1.clone()).collect();
    let rand_post: Vec<_> = per_patient.iter().map(|t| t.2.clone()).collect();
    let example_trajectories = per_patient.into_iter().find_map(|t| t.3).ok_or(Error::EmptyGroup)?;
    let healthy_fcs: Vec<_> = healthy.iter().map(|&i| fcs[i].clone()).collect();
    let (r_pre, r_post) = fc_shift_correlation(&pre, &post, &healthy_fcs)?;
    let (_, r_post_random) = fc_shift_correlation(&pre, &rand_post, &healthy_fcs)?;
    Ok(ModulationResult {
        targets: targets.iter().map(|t| t + 1).collect(),
        random_targets: random_targets.iter().map(|t| t + 1).collect(),
        recovery_pre: recovery_rate(&doctor, &pre)?,
        recovery_targeted: recovery_rate(&doctor, &post)?,
        recovery_random: recovery_rate(&doctor, &rand_post)?,
        r_pre,
        r_post,
        r_post_random,
        shapley,
        example_trajectories,
    })
}
