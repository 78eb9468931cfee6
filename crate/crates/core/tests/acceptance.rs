//! Acceptance suite. Runs every criterion, prints one line each and exits
//! non-zero if any failed.

use nalgebra::{DMatrix, DVector, Vector3};
use neurodyn::graph::{
    char_path_length, clustering_coefficient, global_efficiency, network_portrait, portrait_distribution, portrait_divergence,
    BinaryGraph,
};
use neurodyn::mesh::{build_laplacian, compute_eigenmodes, TriangleMesh};
use neurodyn::modulation::{
    dynamics_loss, dynamics_loss_grad, feature_shapley, lagged_design, logistic_loss_grad, select_targets, shapley_values,
    DynamicsModel, VirtualDoctor,
};
use neurodyn::parcel::{alpha_expansion, parcellate, seg_loss, seg_loss_grad, EnergyProblem, LabelConfig, ParcellationParams, VmfComponent};
use neurodyn::pipeline::{run_consistency, run_e2e, run_modulation, ConsistencyConfig, E2eConfig, ModulationConfig};
use neurodyn::repr::{
    cross_entropy, cross_entropy_grad, decode_pattern, extract_pattern, mse_loss, mse_loss_grad, pattern_backprop, physics_objective,
    stage1_loss, stage1_loss_grad, stage2_loss, stage2_loss_grad, stage3_loss, stage3_loss_grad, Activation, ParamVec, ReprConfig,
    ReprModel,
};
use neurodyn::wave::{
    fit_constrained_amplitudes, integrate_oscillator, physics_loss, physics_loss_grad, reconstruct_field, simulate_modes, white_noise,
    DriveField, DynamicField, WaveParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("eigenmode fidelity", eigenmode_fidelity),
        ("wave analytic check", wave_analytic),
        ("constrained fit recovery", constrained_fit_recovery),
        ("gradient suite", gradient_suite),
        ("graph-cut exactness", graph_cut_exactness),
        ("parcellation recovery", parcellation_recovery),
        ("portrait divergence suite", portrait_divergence_suite),
        ("network metric fixtures", metric_fixtures),
        ("shapley correctness", shapley_correctness),
        ("consistency direction", consistency_direction),
        ("modulation direction", modulation_direction),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] {:>2} {name}: {detail} ({secs:.1} s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {:>2} {name}: {detail} ({secs:.1} s)", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn eigenmode_fidelity() -> Outcome {
    let start = Instant::now();
    let mesh = TriangleMesh::icosphere(3);
    let basis = compute_eigenmodes(&build_laplacian(&mesh).map_err(|e| e.to_string())?, 16, 0).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let mut worst: f64 = 0.0;
    let mut k = 1;
    for l in 1..=3usize {
        let exact = (l * (l + 1)) as f64;
        for _ in 0..(2 * l + 1) {
            worst = worst.max((basis.eigenvalues[k] - exact).abs() / exact);
            k += 1;
        }
    }
    let lambda0 = basis.eigenvalues[0].abs();
    check(worst <= 0.05 && lambda0 < 1e-8 && secs < 30.0, format!("max rel error {worst:.4}, lambda_0 {lambda0:.1e}, {secs:.2} s"))
}

fn critical_error(dt: f64) -> f64 {
    let p = WaveParams { gamma_s: 1.0, r_s: 0.0, dt, penalty_mu: 0.0, drive_seed: 0, drive_std: 0.0 };
    let steps = (1.0 / dt).round() as usize;
    let traj = integrate_oscillator(&p, 0.0, std::iter::repeat_n(0.0, steps + 1), 1.0, 0.0).unwrap();
    (traj[steps] - 2.0 / std::f64::consts::E).abs()
}

fn wave_analytic() -> Outcome {
    let err = critical_error(1e-3);
    let ratios: Vec<f64> = [0.04, 0.02, 0.01].iter().map(|&dt| critical_error(dt) / critical_error(dt / 2.0)).collect();
    let ok = err <= 1e-4 && ratios.iter().all(|r| (3.5..=4.5).contains(r));
    check(ok, format!("|a(1) - 2/e| = {err:.2e}, halving ratios {ratios:.3?}"))
}

fn constrained_fit_recovery() -> Outcome {
    let mesh = TriangleMesh::icosphere(2);
    let basis = compute_eigenmodes(&build_laplacian(&mesh).unwrap(), 10, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a0 = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
    let v0 = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
    let recover = |dt: f64| {
        let p = WaveParams { gamma_s: 2.0, r_s: 0.3, dt, penalty_mu: 10.0, drive_seed: 11, drive_std: 1.0 };
        let steps = (0.4 / dt).round() as usize;
        let drive = DriveField::WhiteNoise { std: p.drive_std, seed: p.drive_seed, steps };
        let planted = simulate_modes(&p, &basis, &drive, &a0, &v0).unwrap();
        let b = reconstruct_field(&planted, &basis).unwrap().phi;
        let fit = fit_constrained_amplitudes(&b, &basis, &p).unwrap();
        (&fit.amplitudes.a - &planted.a).norm() / planted.a.norm()
    };
    let err = recover(1e-3);
    let coarse = recover(4e-3);
    check(err <= 1e-3 && err < coarse, format!("rel error {err:.2e} at dt 1e-3 ({coarse:.2e} at dt 4e-3)"))
}

// Gradients

const FD_EPS: f64 = 1e-5;

fn fd(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + FD_EPS;
            let up = f(&work);
            work[i] = x[i] - FD_EPS;
            let down = f(&work);
            work[i] = x[i];
            (up - down) / (2.0 * FD_EPS)
        })
        .collect()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn small_model(seed: u64) -> (ReprModel, ReprConfig) {
    let cfg = ReprConfig {
        latent_dim: 3,
        tokens: 2,
        time_embed_dim: 4,
        activation: Activation::Tanh,
        diffusion_steps: 10,
        seed,
        ..ReprConfig::default()
    };
    (ReprModel::random(12, &cfg), cfg)
}

fn random_components(k: usize, p: usize, rng: &mut ChaCha8Rng) -> Vec<VmfComponent> {
    (0..k)
        .map(|_| VmfComponent {
            mu_f: DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0)).normalize(),
            kappa_f: rng.random_range(0.5..6.0),
            mu_s: Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize(),
            kappa_s: rng.random_range(0.5..6.0),
        })
        .collect()
}

/// Parameters of encoder, denoiser and pattern decoder in that order.
fn extraction_params(m: &ReprModel) -> Vec<f64> {
    let mut x = m.encoder.to_vec();
    m.denoiser.write_params(&mut x);
    m.pattern_decoder.write_params(&mut x);
    x
}

fn set_extraction_params(m: &mut ReprModel, x: &[f64]) {
    let rest = m.encoder.read_params(x);
    let rest = m.denoiser.read_params(rest);
    m.pattern_decoder.read_params(rest);
}

/// Worst relative error of one loss over 20 random points.
fn worst_over_points(point: impl Fn(u64) -> (Vec<f64>, Vec<f64>)) -> f64 {
    (0..20).map(|s| {
        let (analytic, numeric) = point(s);
        rel(&analytic, &numeric)
    })
    .fold(0.0, f64::max)
}

fn gradient_suite() -> Outcome {
    let mut report: BTreeMap<&str, f64> = BTreeMap::new();

    report.insert("physics", worst_over_points(|s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let decoded = random_matrix(5, 4, &mut rng);
        let field = DynamicField { phi: random_matrix(5, 4, &mut rng) };
        let g = physics_loss_grad(&decoded, &field).unwrap();
        let numeric = fd(&mut |x| physics_loss(&DMatrix::from_column_slice(5, 4, x), &field).unwrap(), decoded.as_slice());
        (g.as_slice().to_vec(), numeric)
    }));

    report.insert("stage1", worst_over_points(|s| {
        let (model, _) = small_model(s);
        let b = white_noise(12, 6, 1.0, s + 100);
        let g = stage1_loss_grad(&b, &model).unwrap();
        let mut analytic = g.encoder.to_vec();
        g.decoder.write_params(&mut analytic);
        let mut x = model.encoder.to_vec();
        model.decoder.write_params(&mut x);
        let numeric = fd(
            &mut |p| {
                let mut m = model.clone();
                let rest = m.encoder.read_params(p);
                m.decoder.read_params(rest);
                stage1_loss(&b, &m).unwrap()
            },
            &x,
        );
        (analytic, numeric)
    }));

    report.insert("stage2", worst_over_points(|s| {
        let (model, cfg) = small_model(s);
        let schedule = cfg.schedule().unwrap();
        let z0 = white_noise(3, 7, 1.0, s + 200);
        let (_, g) = stage2_loss_grad(&z0, &schedule, &model.denoiser, s).unwrap();
        let numeric = fd(
            &mut |p| {
                let mut d = model.denoiser.clone();
                d.set_from(p);
                stage2_loss(&z0, &schedule, &d, s).unwrap()
            },
            &model.denoiser.to_vec(),
        );
        (g.to_vec(), numeric)
    }));

    report.insert("stage3", worst_over_points(|s| {
        let (model, cfg) = small_model(s);
        let b = white_noise(12, 5, 1.0, s + 300);
        let pattern = extract_pattern(&b, &model, &cfg.schedule().unwrap(), cfg.t_star(), s).unwrap();
        let g = stage3_loss_grad(&b, &pattern, &model.pattern_decoder).unwrap();
        let mut analytic = g.d1.to_vec();
        analytic.extend_from_slice(g.z_pattern.as_slice());
        let mut x = model.pattern_decoder.to_vec();
        x.extend_from_slice(pattern.z_pattern.as_slice());
        let n_d1 = model.pattern_decoder.num_params();
        let numeric = fd(
            &mut |p| {
                let mut d1 = model.pattern_decoder.clone();
                d1.set_from(&p[..n_d1]);
                let mut q = pattern.clone();
                q.z_pattern.as_mut_slice().copy_from_slice(&p[n_d1..]);
                stage3_loss(&b, &q, &d1).unwrap()
            },
            &x,
        );
        (analytic, numeric)
    }));

    let mesh = TriangleMesh::icosphere(0);
    report.insert("segmentation", worst_over_points(|s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s + 400);
        let x = random_matrix(12, 4, &mut rng);
        let comps = random_components(3, 4, &mut rng);
        let labels = LabelConfig::new((0..12).map(|_| rng.random_range(0..3)).collect(), 3).unwrap();
        let params = ParcellationParams { k: 3, lambda: 1.3, eta: 0.5, sigma: Some(0.5), ..Default::default() };
        let (_, g) = seg_loss_grad(&labels, &x, &mesh, &comps, &params).unwrap();
        let numeric = fd(&mut |p| seg_loss(&labels, &DMatrix::from_column_slice(12, 4, p), &mesh, &comps, &params).unwrap(), x.as_slice());
        (g.as_slice().to_vec(), numeric)
    }));

    report.insert("cross-entropy", worst_over_points(|s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s + 500);
        let probs: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.random_range(0.05..1.0)).collect()).collect();
        let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
        let (_, g) = cross_entropy_grad(&probs, &labels).unwrap();
        let flat: Vec<f64> = probs.concat();
        let numeric = fd(&mut |p| cross_entropy(&p.chunks(3).map(<[f64]>::to_vec).collect::<Vec<_>>(), &labels).unwrap(), &flat);
        (g.concat(), numeric)
    }));

    report.insert("mse", worst_over_points(|s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s + 600);
        let pred: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
        let target: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (_, g) = mse_loss_grad(&pred, &target).unwrap();
        (g, fd(&mut |p| mse_loss(p, &target).unwrap(), &pred))
    }));

    // Physics consistency plus the segmentation energy of the decoded pattern,
    // differentiated through pattern extraction.
    report.insert("joint fine-tuning", worst_over_points(|s| {
        let (model, cfg) = small_model(s);
        let schedule = cfg.schedule().unwrap();
        let t_star = cfg.t_star();
        let mut rng = ChaCha8Rng::seed_from_u64(s + 700);
        let b = random_matrix(12, 5, &mut rng);
        let phi = DynamicField { phi: random_matrix(12, 5, &mut rng) };
        let comps = random_components(2, cfg.tokens, &mut rng);
        let labels = LabelConfig::new((0..12).map(|_| rng.random_range(0..2)).collect(), 2).unwrap();
        let params = ParcellationParams { k: 2, lambda: 0.7, eta: 0.3, sigma: Some(0.8), ..Default::default() };
        let lambda1 = 0.4;
        let total = |m: &ReprModel| {
            let pattern = extract_pattern(&b, m, &schedule, t_star, s).unwrap();
            let x_hat = decode_pattern(&m.pattern_decoder, &pattern).unwrap();
            physics_objective(&b, m, &schedule, t_star, s, &phi).unwrap() + lambda1 * seg_loss(&labels, &x_hat, &mesh, &comps, &params).unwrap()
        };
        let pattern = extract_pattern(&b, &model, &schedule, t_star, s).unwrap();
        let d1 = &model.pattern_decoder;
        let mut pg = stage3_loss_grad(&phi.phi, &pattern, d1).unwrap();
        let x_hat = decode_pattern(d1, &pattern).unwrap();
        let (_, dx) = seg_loss_grad(&labels, &x_hat, &mesh, &comps, &params).unwrap();
        pg.d1.w += &dx * &pattern.z_pattern * lambda1;
        pg.d1.b += dx.column_sum() * lambda1;
        pg.z_pattern += dx.transpose() * &d1.w * lambda1;
        let (ge, gd) = pattern_backprop(&b, &model, &schedule, t_star, s, &pg.z_pattern).unwrap();
        let mut analytic = ge.to_vec();
        gd.write_params(&mut analytic);
        pg.d1.write_params(&mut analytic);
        let numeric = fd(
            &mut |p| {
                let mut m = model.clone();
                set_extraction_params(&mut m, p);
                total(&m)
            },
            &extraction_params(&model),
        );
        (analytic, numeric)
    }));

    report.insert("dynamics", worst_over_points(|s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s + 800);
        let series = random_matrix(3, 14, &mut rng);
        let (u, y) = lagged_design(&series).unwrap();
        let mut model = DynamicsModel::zeros(3, 4);
        let p: Vec<f64> = (0..model.num_params()).map(|_| rng.random_range(-0.5..0.5)).collect();
        model.set_params(&p).unwrap();
        let (_, g) = dynamics_loss_grad(&model, &u, &y);
        let mut work = model.clone();
        let numeric = fd(
            &mut |q| {
                work.set_params(q).unwrap();
                dynamics_loss(&work, &u, &y)
            },
            &p,
        );
        (g.params(), numeric)
    }));

    report.insert("logistic", worst_over_points(|s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s + 900);
        let xs: Vec<Vec<f64>> = (0..10).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let ys: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let p: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (_, g) = logistic_loss_grad(&p, &xs, &ys, 0.1);
        (g, fd(&mut |q| logistic_loss_grad(q, &xs, &ys, 0.1).0, &p))
    }));

    let worst = report.values().copied().fold(0.0, f64::max);
    let detail = report.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    check(worst <= 1e-4, format!("worst rel error {worst:.1e} [{detail}]"))
}

// Graph cuts

fn potts_energy(unary: &DMatrix<f64>, edges: &[(usize, usize, f64)], lambda: f64, labels: &[usize]) -> f64 {
    let mut e = 0.0;
    for (v, &l) in labels.iter().enumerate() {
        e += unary[(v, l)];
    }
    for &(a, b, w) in edges {
        if labels[a] != labels[b] {
            e += lambda * w;
        }
    }
    e
}

fn enumeration_optimum(p: &EnergyProblem) -> f64 {
    let n = p.unary.nrows();
    let k = p.num_labels();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        best = best.min(potts_energy(&p.unary, &p.edges, p.lambda, &labels));
        let mut i = 0;
        while i < n {
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
        if i == n {
            return best;
        }
    }
}

fn random_instance(n: usize, k: usize, unary: std::ops::Range<f64>, rng: &mut ChaCha8Rng) -> EnergyProblem {
    let unary = DMatrix::from_fn(n, k, |_, _| rng.random_range(unary.clone()));
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.random_bool(0.4) {
                edges.push((a, b, rng.random_range(0.0..1.0)));
            }
        }
    }
    EnergyProblem { unary, edges, lambda: rng.random_range(0.1..2.0) }
}

/// Sweeps over all labels until a sweep changes nothing; returns the labels
/// and the energy after every sweep (initial energy first).
fn expand_to_fixed_point(p: &EnergyProblem, init: Vec<usize>) -> (Vec<usize>, Vec<f64>) {
    let k = p.num_labels();
    let mut labels = LabelConfig::new(init, k).unwrap();
    let mut trace = vec![potts_energy(&p.unary, &p.edges, p.lambda, &labels.labels)];
    loop {
        let before = labels.clone();
        for alpha in 0..k {
            labels = alpha_expansion(&labels, alpha, p);
        }
        trace.push(potts_energy(&p.unary, &p.edges, p.lambda, &labels.labels));
        if labels == before {
            return (labels.labels, trace);
        }
    }
}

fn graph_cut_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut exact = 0;
    for _ in 0..200 {
        let n = rng.random_range(2..=12);
        let p = random_instance(n, 2, -2.0..2.0, &mut rng);
        let init = (0..n).map(|_| rng.random_range(0..2)).collect();
        let (labels, _) = expand_to_fixed_point(&p, init);
        if (potts_energy(&p.unary, &p.edges, p.lambda, &labels) - enumeration_optimum(&p)).abs() < 1e-9 {
            exact += 1;
        }
    }
    // Non-negative costs keep the approximation ratio meaningful.
    let (mut monotone, mut within, mut worst_ratio) = (0, 0, 1.0f64);
    for _ in 0..200 {
        let n = rng.random_range(3..=9);
        let p = random_instance(n, 3, 0.0..2.0, &mut rng);
        let init = (0..n).map(|_| rng.random_range(0..3)).collect();
        let (_, trace) = expand_to_fixed_point(&p, init);
        if trace.windows(2).all(|w| w[1] <= w[0] + 1e-12) {
            monotone += 1;
        }
        let opt = enumeration_optimum(&p);
        let ratio = if opt > 0.0 { trace.last().unwrap() / opt } else { 1.0 };
        worst_ratio = worst_ratio.max(ratio);
        if *trace.last().unwrap() <= 1.05 * opt + 1e-12 {
            within += 1;
        }
    }
    check(
        exact == 200 && monotone == 200 && within == 200,
        format!("K=2 exact {exact}/200; K=3 monotone {monotone}/200, within 5% {within}/200 (worst ratio {worst_ratio:.4})"),
    )
}

// Parcellation

fn best_matched_agreement(found: &[usize], truth: &[usize], k: usize) -> f64 {
    fn permutations(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![Vec::new()];
        }
        let mut out = Vec::new();
        for p in permutations(k - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, k - 1);
                out.push(q);
            }
        }
        out
    }
    permutations(k)
        .iter()
        .map(|perm| found.iter().zip(truth).filter(|(f, t)| perm[**f] == **t).count())
        .max()
        .unwrap() as f64
        / truth.len() as f64
}

fn planted_features(mesh: &TriangleMesh, truth: &[usize], k: usize, noise: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(mesh.num_vertices(), k, |v, j| f64::from(u8::from(truth[v] == j)) + noise * rng.random_range(-1.0..1.0))
}

fn parcellation_recovery() -> Outcome {
    let mesh = TriangleMesh::icosphere(2);
    let halves: Vec<usize> = mesh.vertices().iter().map(|p| usize::from(p.z < 0.0)).collect();
    let x2 = planted_features(&mesh, &halves, 2, 0.0, 0);
    let p2 = parcellate(&x2, &mesh, &ParcellationParams { k: 2, ..Default::default() }).map_err(|e| e.to_string())?;
    let a2 = best_matched_agreement(&p2.labels.labels, &halves, 2);

    let quadrants: Vec<usize> = mesh.vertices().iter().map(|p| 2 * usize::from(p.x < 0.0) + usize::from(p.y < 0.0)).collect();
    let x4 = planted_features(&mesh, &quadrants, 4, 0.4, 1);
    let p4 = parcellate(&x4, &mesh, &ParcellationParams { k: 4, ..Default::default() }).map_err(|e| e.to_string())?;
    let a4 = best_matched_agreement(&p4.labels.labels, &quadrants, 4);
    check(a2 >= 0.99 && a4 >= 0.90, format!("2-region clean {:.1}%, 4-region noisy {:.1}%", 100.0 * a2, 100.0 * a4))
}

// Portraits

/// All-pairs hop distances by Floyd-Warshall.
fn hop_distances(g: &BinaryGraph) -> Vec<Vec<Option<usize>>> {
    let n = g.num_nodes();
    let mut d = vec![vec![None; n]; n];
    for i in 0..n {
        d[i][i] = Some(0);
        for &j in g.neighbors(i) {
            d[i][j] = Some(1);
        }
    }
    for m in 0..n {
        for i in 0..n {
            for j in 0..n {
                if let (Some(a), Some(b)) = (d[i][m], d[m][j]) {
                    if d[i][j].is_none_or(|c| a + b < c) {
                        d[i][j] = Some(a + b);
                    }
                }
            }
        }
    }
    d
}

/// `P(k, l) = P(k | l) P(l)` built from ordered node pairs, normalised by the
/// number of connected ordered pairs including self-pairs.
fn oracle_distribution(g: &BinaryGraph) -> BTreeMap<(usize, usize), f64> {
    let n = g.num_nodes();
    let d = hop_distances(g);
    let mut shell: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut pairs_at: BTreeMap<usize, usize> = BTreeMap::new();
    let max_l = d.iter().flatten().flatten().copied().max().unwrap_or(0);
    for row in &d {
        for l in 0..=max_l {
            let k = row.iter().filter(|x| **x == Some(l)).count();
            *shell.entry((k, l)).or_default() += 1;
            *pairs_at.entry(l).or_default() += k;
        }
    }
    let connected: usize = pairs_at.values().sum();
    shell
        .into_iter()
        .map(|((k, l), count)| ((k, l), count as f64 / n as f64 * pairs_at[&l] as f64 / connected as f64))
        .filter(|(_, p)| *p > 0.0)
        .collect()
}

/// `H(M) - (H(P) + H(Q)) / 2` in bits.
fn oracle_jsd(p: &BTreeMap<(usize, usize), f64>, q: &BTreeMap<(usize, usize), f64>) -> f64 {
    let entropy = |it: &mut dyn Iterator<Item = f64>| -> f64 { it.filter(|x| *x > 0.0).map(|x| -x * x.ln()).sum::<f64>() / 2f64.ln() };
    let mut keys: Vec<_> = p.keys().chain(q.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();
    let m = keys.iter().map(|k| 0.5 * (p.get(k).unwrap_or(&0.0) + q.get(k).unwrap_or(&0.0)));
    entropy(&mut m.into_iter()) - 0.5 * (entropy(&mut p.values().copied()) + entropy(&mut q.values().copied()))
}

fn random_graph(n: usize, density: f64, rng: &mut ChaCha8Rng) -> BinaryGraph {
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.random_bool(density) {
                edges.push((a, b));
            }
        }
    }
    BinaryGraph::from_edges(n, &edges).unwrap()
}

fn portrait_divergence_suite() -> Outcome {
    let k3 = BinaryGraph::complete(3);
    let p3 = BinaryGraph::path(3);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut identity_ok, mut worst_asym, mut in_range) = (true, 0.0f64, true);
    for _ in 0..100 {
        let a = random_graph(rng.random_range(1..14), rng.random_range(0.05..0.9), &mut rng);
        let b = random_graph(rng.random_range(1..14), rng.random_range(0.05..0.9), &mut rng);
        identity_ok &= portrait_divergence(&a, &a) == 0.0;
        let d = portrait_divergence(&a, &b);
        worst_asym = worst_asym.max((d - portrait_divergence(&b, &a)).abs());
        in_range &= (0.0..=1.0).contains(&d);
    }

    let k3p = network_portrait(&k3).b;
    let p3p = network_portrait(&p3).b;
    let k3_table = DMatrix::from_row_slice(2, 4, &[0.0, 3.0, 0.0, 0.0, 0.0, 0.0, 3.0, 0.0]);
    let p3_table = DMatrix::from_row_slice(3, 4, &[0.0, 3.0, 0.0, 0.0, 0.0, 2.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0]);
    let tables_ok = k3p == k3_table && p3p == p3_table;

    // Hand-derived distributions: K3 {(1,0): 1/3, (2,1): 2/3};
    // P3 {(1,0): 9/27, (1,1): 8/27, (2,1): 4/27, (0,2): 2/27, (1,2): 4/27}.
    let hand_k3: BTreeMap<_, _> = [((1, 0), 1.0 / 3.0), ((2, 1), 2.0 / 3.0)].into_iter().collect();
    let hand_p3: BTreeMap<_, _> =
        [((1, 0), 9.0 / 27.0), ((1, 1), 8.0 / 27.0), ((2, 1), 4.0 / 27.0), ((0, 2), 2.0 / 27.0), ((1, 2), 4.0 / 27.0)].into_iter().collect();
    let close = |a: &BTreeMap<(usize, usize), f64>, b: &BTreeMap<(usize, usize), f64>| {
        a.len() == b.len() && a.iter().all(|(k, v)| b.get(k).is_some_and(|w| (v - w).abs() < 1e-15))
    };
    let lib_k3 = portrait_distribution(&network_portrait(&k3), &k3).unwrap().p;
    let lib_p3 = portrait_distribution(&network_portrait(&p3), &p3).unwrap().p;
    let dist_ok = close(&lib_k3, &hand_k3) && close(&lib_p3, &hand_p3) && close(&oracle_distribution(&p3), &hand_p3);

    let pdiv = portrait_divergence(&k3, &p3);
    let oracle = oracle_jsd(&hand_k3, &hand_p3);
    let oracle_gap = (pdiv - oracle).abs();
    let ok = identity_ok && worst_asym <= 1e-12 && in_range && tables_ok && dist_ok && oracle_gap <= 1e-12 && portrait_divergence(&k3, &k3) == 0.0;
    check(
        ok,
        format!(
            "identity {identity_ok}, max asymmetry {worst_asym:.1e}, range {in_range}, tables {tables_ok}, distributions {dist_ok}, PDiv(K3,P3) {pdiv:.12} vs oracle gap {oracle_gap:.1e}"
        ),
    )
}

fn metric_fixtures() -> Outcome {
    let k3 = BinaryGraph::complete(3);
    let p3 = BinaryGraph::path(3);
    let split = BinaryGraph::from_edges(4, &[(0, 1), (2, 3)]).unwrap();
    let got = [
        char_path_length(&k3),
        clustering_coefficient(&k3),
        global_efficiency(&k3),
        char_path_length(&p3),
        clustering_coefficient(&p3),
        global_efficiency(&p3),
        global_efficiency(&split),
    ];
    let want = [1.0, 1.0, 1.0, 4.0 / 3.0, 0.0, 5.0 / 6.0, 1.0 / 3.0];
    let worst = got.iter().zip(&want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
    check(worst < 1e-12, format!("K3 {:?}, P3 {:?}, split efficiency {:.6}, max deviation {worst:.1e}", &got[..3], &got[3..6], got[6]))
}

// Shapley

/// Exact Shapley values by the subset formula.
fn subset_shapley(f: &dyn Fn(&[f64]) -> f64, x: &[f64], base: &[f64]) -> Vec<f64> {
    let n = x.len();
    let fact: Vec<f64> = (0..=n).scan(1.0, |acc, i| {
        if i > 0 {
            *acc *= i as f64;
        }
        Some(*acc)
    })
    .collect();
    let value = |mask: usize| -> f64 {
        let z: Vec<f64> = (0..n).map(|i| if mask >> i & 1 == 1 { x[i] } else { base[i] }).collect();
        f(&z)
    };
    let values: Vec<f64> = (0..1usize << n).map(value).collect();
    (0..n)
        .map(|i| {
            let mut phi = 0.0;
            for mask in 0..1usize << n {
                if mask >> i & 1 == 0 {
                    let s = mask.count_ones() as usize;
                    phi += fact[s] * fact[n - s - 1] / fact[n] * (values[mask | 1 << i] - values[mask]);
                }
            }
            phi
        })
        .collect()
}

fn shapley_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);

    let regions = 5;
    let features = regions * (regions - 1) / 2;
    let doctor = VirtualDoctor {
        regions,
        weights: (0..features).map(|_| rng.random_range(-2.0..2.0)).collect(),
        bias: 0.3,
        threshold: 0.5,
        ridge: 0.0,
        seed: 0,
        losses: Vec::new(),
    };
    let fc = {
        let m = random_matrix(regions, regions, &mut rng);
        let mut s = (&m + m.transpose()) * 0.5;
        s.fill_diagonal(1.0);
        s
    };
    let baseline: Vec<f64> = (0..features).map(|_| rng.random_range(-0.5..0.5)).collect();
    let report = shapley_values(&doctor, &fc, &baseline, 1000, 0).map_err(|e| e.to_string())?;
    let mut x = Vec::new();
    for i in 0..regions {
        for j in i + 1..regions {
            x.push(fc[(i, j)]);
        }
    }
    let linear_gap = report.edges.phi.iter().enumerate().map(|(e, p)| (p - doctor.weights[e] * (x[e] - baseline[e])).abs()).fold(0.0, f64::max);
    let enum_gap = rel(&report.edges.phi, &subset_shapley(&|z| doctor.logit(z), &x, &baseline));

    // Sampling regime: a non-linear game with more features than enumeration allows.
    let n = 15;
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let game = |z: &[f64]| -> f64 { (z.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()).tanh() + z[0] * z[1] - z[2] * z[3] * z[4] };
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let bs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let sampled = feature_shapley(&game, &xs, &bs, 1000, 4).map_err(|e| e.to_string())?;
    let sigma = sampled.std_error.iter().map(|s| s * s).sum::<f64>().sqrt();
    let efficiency_ok = !sampled.exact && sampled.efficiency_residual.abs() <= 3.0 * sigma + 1e-12;
    let truth = subset_shapley(&game, &xs, &bs);
    let covered = sampled.phi.iter().zip(&sampled.std_error).zip(&truth).filter(|((p, s), t)| (*p - *t).abs() <= 3.0 * *s + 1e-12).count();

    let mut selection_ok = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=10);
        let k = rng.random_range(1..=n);
        let phi: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let best = (0..1usize << n)
            .filter(|m| m.count_ones() as usize == k)
            .max_by(|a, b| {
                let sum = |m: &usize| (0..n).filter(|i| m >> i & 1 == 1).map(|i| phi[i]).sum::<f64>();
                sum(a).total_cmp(&sum(b))
            })
            .unwrap();
        let chosen: Vec<usize> = (0..n).filter(|i| best >> i & 1 == 1).collect();
        if select_targets(&phi, k).map_err(|e| e.to_string())? == chosen {
            selection_ok += 1;
        }
    }
    let ok = report.edges.exact && linear_gap <= 1e-10 && enum_gap <= 1e-10 && efficiency_ok && selection_ok == 200;
    check(
        ok,
        format!(
            "linear gap {linear_gap:.1e}, enumeration oracle gap {enum_gap:.1e}, sampled efficiency residual {:.1e} (3 sigma {:.1e}), {covered}/{n} sampled values within 3 sigma of exact, selection {selection_ok}/200",
            sampled.efficiency_residual,
            3.0 * sigma
        ),
    )
}

// Experiments

fn consistency_direction() -> Outcome {
    let start = Instant::now();
    let res = run_consistency(&ConsistencyConfig::default()).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let ok = res.median_within > res.median_between && res.personalized_not_worse >= 0.6 && secs < 600.0;
    check(
        ok,
        format!(
            "median within {:.3} vs between {:.3}, personalised not worse than baseline in {:.0}% of subjects",
            res.median_within,
            res.median_between,
            100.0 * res.personalized_not_worse
        ),
    )
}

fn modulation_direction() -> Outcome {
    let results: Vec<_> = (0..20u64)
        .map(|seed| run_modulation(&ModulationConfig { seed, ..ModulationConfig::default() }))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let recovery = results.iter().filter(|r| r.recovery_targeted > r.recovery_random).count();
    let shift = results.iter().filter(|r| r.r_post > r.r_pre).count();
    let mean = |f: fn(&neurodyn::pipeline::ModulationResult) -> f64| results.iter().map(f).sum::<f64>() / results.len() as f64;
    check(
        recovery >= 15 && shift >= 15,
        format!(
            "targeted beats random recovery in {recovery}/20 seeds, r_post > r_pre in {shift}/20 (mean recovery {:.2} targeted vs {:.2} random vs {:.2} before; mean r {:.3} -> {:.3})",
            mean(|r| r.recovery_targeted),
            mean(|r| r.recovery_random),
            mean(|r| r.recovery_pre),
            mean(|r| r.r_pre),
            mean(|r| r.r_post)
        ),
    )
}

fn determinism() -> Outcome {
    let cfg = E2eConfig::default();
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ra = run_e2e(&cfg, a.path()).map_err(|e| e.to_string())?;
    let rb = run_e2e(&cfg, b.path()).map_err(|e| e.to_string())?;
    let mut identical = 0;
    for name in &ra.artifacts {
        if std::fs::read(a.path().join(name)).ok() == std::fs::read(b.path().join(name)).ok() {
            identical += 1;
        }
    }
    let binaries = ra.artifacts.iter().filter(|n| n.ends_with(".ndbf")).count();
    let ok = ra.artifacts == rb.artifacts && identical == ra.artifacts.len() && binaries > 0 && ra.pdiv == rb.pdiv;
    check(ok, format!("{identical}/{} artifacts byte-identical ({binaries} binary)", ra.artifacts.len()))
}
