//! Damped-wave neural field model expanded in geometric eigenmodes.
//!
//! Substituting `phi = sum_k a_k psi_k` into
//! `[(1/g^2) d_tt + (2/g) d_t + 1 - r^2 lap] phi = Q` and using
//! `L psi_k = lambda_k M psi_k` decouples the field into one damped oscillator
//! per mode with stiffness `1 + r^2 lambda_k`.

use crate::error::{Error, Result};
use crate::linalg::SymBand;
use crate::mesh::EigenmodeBasis;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveParams {
    /// Temporal damping rate, 1/s.
    pub gamma_s: f64,
    /// Spatial correlation length, mm.
    pub r_s: f64,
    /// Time step, s.
    pub dt: f64,
    pub penalty_mu: f64,
    pub drive_seed: u64,
    /// Standard deviation of the white-noise drive.
    #[serde(default = "default_drive_std")]
    pub drive_std: f64,
}

fn default_drive_std() -> f64 {
    1.0
}

impl Default for WaveParams {
    fn default() -> Self {
        WaveParams { gamma_s: 116.0, r_s: 28.9, dt: 0.72, penalty_mu: 1.0, drive_seed: 0, drive_std: 1.0 }
    }
}

impl WaveParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma_s > 0.0
            && self.r_s >= 0.0
            && self.dt > 0.0
            && self.penalty_mu >= 0.0
            && self.drive_std >= 0.0
            && [self.gamma_s, self.r_s, self.dt, self.penalty_mu, self.drive_std].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid wave parameters {self:?}")))
        }
    }

    /// Modal stiffness `1 + r_s^2 lambda`.
    pub fn stiffness(&self, eigenvalue: f64) -> f64 {
        1.0 + self.r_s * self.r_s * eigenvalue
    }
}

/// External drive `Q(r, t)` sampled at the integrator steps.
#[derive(Debug, Clone, PartialEq)]
pub enum DriveField {
    Explicit(DMatrix<f64>),
    WhiteNoise { std: f64, seed: u64, steps: usize },
}

impl DriveField {
    pub fn zeros(vertices: usize, steps: usize) -> Self {
        DriveField::Explicit(DMatrix::zeros(vertices, steps))
    }

    pub fn steps(&self) -> usize {
        match self {
            DriveField::Explicit(q) => q.ncols(),
            DriveField::WhiteNoise { steps, .. } => *steps,
        }
    }

    /// V x T realization. White noise is drawn column by column from the seed.
    pub fn realize(&self, vertices: usize) -> Result<DMatrix<f64>> {
        match self {
            DriveField::Explicit(q) => {
                if q.nrows() != vertices {
                    return Err(Error::shape(format!("drive has {} rows, mesh has {vertices}", q.nrows())));
                }
                if !q.iter().all(|v| v.is_finite()) {
                    return Err(Error::InconsistentInput("drive contains non-finite values".into()));
                }
                Ok(q.clone())
            }
            DriveField::WhiteNoise { std, seed, steps } => Ok(white_noise(vertices, *steps, *std, *seed)),
        }
    }

    /// Drive projected on the modes, N x T.
    pub fn modal(&self, basis: &EigenmodeBasis) -> Result<DMatrix<f64>> {
        Ok(basis.projector() * self.realize(basis.num_vertices())?)
    }
}

pub fn white_noise(rows: usize, cols: usize, std: f64, seed: u64) -> DMatrix<f64> {
    if std == 0.0 {
        return DMatrix::zeros(rows, cols);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("std is finite and non-negative");
    DMatrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng))
}

/// Modal amplitudes `a_k(t)`, N x T.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalAmplitudes {
    pub a: DMatrix<f64>,
    pub dt: f64,
}

/// Field `Phi_dyn(r, t)`, V x T.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicField {
    pub phi: DMatrix<f64>,
}

fn check_rows(b: &DMatrix<f64>, basis: &EigenmodeBasis) -> Result<()> {
    if b.nrows() != basis.num_vertices() {
        return Err(Error::shape(format!("signal has {} rows, basis has {} vertices", b.nrows(), basis.num_vertices())));
    }
    Ok(())
}

/// Mass-weighted least-squares modal coefficients of every column.
pub fn project_to_modes(b: &DMatrix<f64>, basis: &EigenmodeBasis, dt: f64) -> Result<ModalAmplitudes> {
    check_rows(b, basis)?;
    Ok(ModalAmplitudes { a: basis.projector() * b, dt })
}

pub fn reconstruct_field(amps: &ModalAmplitudes, basis: &EigenmodeBasis) -> Result<DynamicField> {
    if amps.a.nrows() != basis.num_modes() {
        return Err(Error::shape(format!("{} amplitude rows for {} modes", amps.a.nrows(), basis.num_modes())));
    }
    Ok(DynamicField { phi: &basis.modes * &amps.a })
}

/// Integrates every modal oscillator with the average-acceleration Newmark
/// scheme (trapezoidal in velocity and displacement). Column 0 is the initial
/// state; the output has as many columns as the drive has steps.
pub fn simulate_modes(
    params: &WaveParams,
    basis: &EigenmodeBasis,
    drive: &DriveField,
    init_a: &DVector<f64>,
    init_v: &DVector<f64>,
) -> Result<ModalAmplitudes> {
    params.validate()?;
    let n = basis.num_modes();
    if init_a.len() != n || init_v.len() != n {
        return Err(Error::shape(format!("initial state lengths {} / {} for {n} modes", init_a.len(), init_v.len())));
    }
    let q = drive.modal(basis)?;
    let steps = q.ncols();
    let mut out = DMatrix::zeros(n, steps);
    if steps == 0 {
        return Ok(ModalAmplitudes { a: out, dt: params.dt });
    }
    for k in 0..n {
        let traj = integrate_oscillator(params, basis.eigenvalues[k], q.row(k).iter().copied(), init_a[k], init_v[k])?;
        for (t, v) in traj.into_iter().enumerate() {
            out[(k, t)] = v;
        }
    }
    Ok(ModalAmplitudes { a: out, dt: params.dt })
}

/// Single-mode integrator shared by [`simulate_modes`].
pub fn integrate_oscillator(
    params: &WaveParams,
    eigenvalue: f64,
    forcing: impl IntoIterator<Item = f64>,
    a0: f64,
    v0: f64,
) -> Result<Vec<f64>> {
    let m = 1.0 / (params.gamma_s * params.gamma_s);
    let c = 2.0 / params.gamma_s;
    let k = params.stiffness(eigenvalue);
    let dt = params.dt;
    let lhs = m + c * dt / 2.0 + k * dt * dt / 4.0;

    let mut forcing = forcing.into_iter();
    let Some(f0) = forcing.next() else { return Ok(Vec::new()) };
    let (mut a, mut v) = (a0, v0);
    let mut acc = (f0 - c * v - k * a) / m;
    let mut out = vec![a];
    for (step, f) in forcing.enumerate() {
        let acc_next = (f - c * (v + dt / 2.0 * acc) - k * (a + dt * v + dt * dt / 4.0 * acc)) / lhs;
        a += dt * v + dt * dt / 4.0 * (acc + acc_next);
        v += dt / 2.0 * (acc + acc_next);
        acc = acc_next;
        if !(a.is_finite() && v.is_finite()) {
            return Err(Error::UnstableStep { step: step + 1 });
        }
        out.push(a);
    }
    Ok(out)
}

/// Discrete constraint operator for one mode: rows are
/// `(1/g^2) a'' + (2/g) a' + w a` with central differences in the interior
/// and one-sided three-point stencils at both ends.
fn constraint_stencil(params: &WaveParams, eigenvalue: f64, len: usize) -> Vec<(usize, [f64; 3])> {
    let c2 = 1.0 / (params.gamma_s * params.gamma_s * params.dt * params.dt);
    let c1 = 2.0 / params.gamma_s / (2.0 * params.dt);
    let w = params.stiffness(eigenvalue);
    let mut rows = Vec::with_capacity(len);
    rows.push((0, [c2 - 3.0 * c1 + w, -2.0 * c2 + 4.0 * c1, c2 - c1]));
    for t in 1..len - 1 {
        rows.push((t - 1, [c2 - c1, -2.0 * c2 + w, c2 + c1]));
    }
    rows.push((len - 3, [c2 + c1, -2.0 * c2 - 4.0 * c1, c2 + 3.0 * c1 + w]));
    rows
}

fn apply_stencil(rows: &[(usize, [f64; 3])], a: &[f64]) -> Vec<f64> {
    rows.iter().map(|(start, c)| c[0] * a[*start] + c[1] * a[start + 1] + c[2] * a[start + 2]).collect()
}

/// Result of the penalized amplitude fit.
#[derive(Debug, Clone)]
pub struct ConstrainedFit {
    pub amplitudes: ModalAmplitudes,
    /// Mass-weighted data misfit plus `penalty_mu` times the squared constraint residual.
    pub objective: f64,
    pub data_misfit: f64,
    /// Squared norm of the discrete constraint residual summed over modes.
    pub constraint_residual: f64,
    /// Max-norm of the normal-equation residual over all modes.
    pub normal_residual: f64,
}

/// Fits modal amplitudes to `b` with the wave equation as a quadratic penalty.
/// The drive is one white-noise realization drawn from `params.drive_seed`.
pub fn fit_constrained_amplitudes(
    b: &DMatrix<f64>,
    basis: &EigenmodeBasis,
    params: &WaveParams,
) -> Result<ConstrainedFit> {
    params.validate()?;
    check_rows(b, basis)?;
    let t_len = b.ncols();
    if t_len < 3 {
        return Err(Error::shape(format!("need at least 3 time points, got {t_len}")));
    }
    let proj = project_to_modes(b, basis, params.dt)?;
    let q = fit_drive(basis, params, t_len)?;
    let n = basis.num_modes();
    let mut a = proj.a.clone();
    let mut normal_residual: f64 = 0.0;
    if params.penalty_mu > 0.0 {
        for k in 0..n {
            let rows = constraint_stencil(params, basis.eigenvalues[k], t_len);
            let mut normal = SymBand::zeros(t_len, 2);
            for i in 0..t_len {
                normal.add(i, i, 1.0);
            }
            let mut rhs: Vec<f64> = proj.a.row(k).iter().copied().collect();
            for (r, (start, c)) in rows.iter().enumerate() {
                for i in 0..3 {
                    rhs[start + i] += params.penalty_mu * c[i] * q[(k, r)];
                    // band storage is symmetric: one add per unordered pair
                    for j in 0..=i {
                        normal.add(start + i, start + j, params.penalty_mu * c[i] * c[j]);
                    }
                }
            }
            let sol = normal.solve(&rhs).ok_or(Error::SingularSystem { mode: k })?;
            let back = normal.mul_vec(&sol);
            for i in 0..t_len {
                normal_residual = normal_residual.max((back[i] - rhs[i]).abs());
                a[(k, i)] = sol[i];
            }
        }
    }
    let amplitudes = ModalAmplitudes { a, dt: params.dt };
    let (objective, data_misfit, constraint_residual) = fit_objective_parts(&amplitudes, b, basis, params, &q)?;
    Ok(ConstrainedFit { amplitudes, objective, data_misfit, constraint_residual, normal_residual })
}

/// Modal drive realization used by [`fit_constrained_amplitudes`].
pub fn fit_drive(basis: &EigenmodeBasis, params: &WaveParams, steps: usize) -> Result<DMatrix<f64>> {
    DriveField::WhiteNoise { std: params.drive_std, seed: params.drive_seed, steps }.modal(basis)
}

/// Objective of the penalized fit evaluated at arbitrary amplitudes.
pub fn fit_objective(amps: &ModalAmplitudes, b: &DMatrix<f64>, basis: &EigenmodeBasis, params: &WaveParams) -> Result<f64> {
    let q = fit_drive(basis, params, b.ncols())?;
    Ok(fit_objective_parts(amps, b, basis, params, &q)?.0)
}

fn fit_objective_parts(
    amps: &ModalAmplitudes,
    b: &DMatrix<f64>,
    basis: &EigenmodeBasis,
    params: &WaveParams,
    q: &DMatrix<f64>,
) -> Result<(f64, f64, f64)> {
    let field = reconstruct_field(amps, basis)?;
    let diff = &field.phi - b;
    let mut misfit = 0.0;
    for t in 0..diff.ncols() {
        for v in 0..diff.nrows() {
            misfit += basis.mass[v] * diff[(v, t)] * diff[(v, t)];
        }
    }
    let constraint = constraint_residual(amps, basis, params, q);
    Ok((misfit + params.penalty_mu * constraint, misfit, constraint))
}

/// Squared norm of the discrete wave-constraint residual `D a - q`, summed over modes.
pub fn constraint_residual(amps: &ModalAmplitudes, basis: &EigenmodeBasis, params: &WaveParams, q: &DMatrix<f64>) -> f64 {
    let t_len = amps.a.ncols();
    let mut total = 0.0;
    for k in 0..amps.a.nrows() {
        let rows = constraint_stencil(params, basis.eigenvalues[k], t_len);
        let a: Vec<f64> = amps.a.row(k).iter().copied().collect();
        for (r, v) in apply_stencil(&rows, &a).into_iter().enumerate() {
            let e = v - q[(k, r)];
            total += e * e;
        }
    }
    total
}

/// Mean squared entrywise difference between a decoded field and `Phi_dyn`.
pub fn physics_loss(decoded: &DMatrix<f64>, phi_dyn: &DynamicField) -> Result<f64> {
    if decoded.shape() != phi_dyn.phi.shape() {
        return Err(Error::shape(format!("decoded {:?} vs field {:?}", decoded.shape(), phi_dyn.phi.shape())));
    }
    let n = decoded.len() as f64;
    Ok(decoded.iter().zip(phi_dyn.phi.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// Gradient of [`physics_loss`] with respect to the decoded field.
pub fn physics_loss_grad(decoded: &DMatrix<f64>, phi_dyn: &DynamicField) -> Result<DMatrix<f64>> {
    if decoded.shape() != phi_dyn.phi.shape() {
        return Err(Error::shape("decoded and field shapes differ"));
    }
    Ok((decoded - &phi_dyn.phi) * (2.0 / decoded.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_laplacian, compute_eigenmodes, TriangleMesh};
    use rand::{Rng, SeedableRng};

    fn small_basis(n: usize) -> EigenmodeBasis {
        let mesh = TriangleMesh::icosphere(1);
        let lap = build_laplacian(&mesh).unwrap();
        compute_eigenmodes(&lap, n, 0).unwrap()
    }

    fn critical_params(dt: f64) -> WaveParams {
        WaveParams { gamma_s: 1.0, r_s: 0.0, dt, penalty_mu: 0.0, drive_seed: 0, drive_std: 0.0 }
    }

    #[test]
    fn critically_damped_oscillator() {
        let p = critical_params(1e-3);
        let traj = integrate_oscillator(&p, 0.0, std::iter::repeat_n(0.0, 1001), 1.0, 0.0).unwrap();
        let exact = 2.0 / std::f64::consts::E;
        assert!((traj[1000] - exact).abs() < 1e-4);
    }

    #[test]
    fn second_order_convergence() {
        let err = |dt: f64| {
            let p = critical_params(dt);
            let steps = (1.0 / dt).round() as usize;
            let traj = integrate_oscillator(&p, 0.0, std::iter::repeat_n(0.0, steps + 1), 1.0, 0.0).unwrap();
            traj.iter()
                .enumerate()
                .map(|(i, a)| {
                    let t = i as f64 * dt;
                    (a - (1.0 + t) * (-t).exp()).abs()
                })
                .fold(0.0, f64::max)
        };
        let ratio = err(0.02) / err(0.01);
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn zero_drive_zero_init_stays_zero() {
        let basis = small_basis(6);
        let p = WaveParams { dt: 1e-3, ..WaveParams::default() };
        let z = DVector::zeros(6);
        let out = simulate_modes(&p, &basis, &DriveField::zeros(basis.num_vertices(), 50), &z, &z).unwrap();
        assert!(out.a.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn projection_recovers_basis_vector() {
        let basis = small_basis(8);
        let b = basis.modes.column(2).into_owned();
        let b = DMatrix::from_columns(&[b]);
        let a = project_to_modes(&b, &basis, 1.0).unwrap();
        for k in 0..8 {
            let want = if k == 2 { 1.0 } else { 0.0 };
            assert!((a.a[(k, 0)] - want).abs() < 1e-10);
        }
        let zero = project_to_modes(&DMatrix::zeros(basis.num_vertices(), 3), &basis, 1.0).unwrap();
        assert!(zero.a.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn projection_matches_normal_equations() {
        let basis = small_basis(10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = DMatrix::from_fn(basis.num_vertices(), 4, |_, _| rng.random_range(-1.0..1.0));
        let a = project_to_modes(&b, &basis, 1.0).unwrap();
        let m = DMatrix::from_diagonal(&basis.mass);
        let gram = basis.modes.transpose() * &m * &basis.modes;
        let rhs = basis.modes.transpose() * &m * &b;
        let oracle = gram.lu().solve(&rhs).unwrap();
        assert!((a.a - &oracle).amax() < 1e-8);
        // residual is M-orthogonal to the span
        let resid = &b - &basis.modes * &oracle;
        let ortho = basis.modes.transpose() * &m * resid;
        assert!(ortho.amax() < 1e-8);
    }

    #[test]
    fn reconstruct_round_trip() {
        let basis = small_basis(7);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = DMatrix::from_fn(7, 5, |_, _| rng.random_range(-1.0..1.0));
        let b = &basis.modes * &a;
        let back = reconstruct_field(&project_to_modes(&b, &basis, 1.0).unwrap(), &basis).unwrap();
        assert!((back.phi - b).amax() < 1e-8);

        let mut single = DMatrix::zeros(7, 3);
        single.row_mut(4).fill(1.0);
        let f = reconstruct_field(&ModalAmplitudes { a: single, dt: 1.0 }, &basis).unwrap();
        for t in 0..3 {
            assert_eq!(f.phi.column(t), basis.modes.column(4));
        }
    }

    #[test]
    fn penalty_off_equals_projection() {
        let basis = small_basis(6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = DMatrix::from_fn(basis.num_vertices(), 20, |_, _| rng.random_range(-1.0..1.0));
        let p = WaveParams { penalty_mu: 0.0, ..WaveParams::default() };
        let fit = fit_constrained_amplitudes(&b, &basis, &p).unwrap();
        let proj = project_to_modes(&b, &basis, p.dt).unwrap();
        assert!((fit.amplitudes.a - proj.a).amax() < 1e-10);
    }

    #[test]
    fn fit_needs_three_samples() {
        let basis = small_basis(3);
        let b = DMatrix::zeros(basis.num_vertices(), 2);
        assert!(matches!(fit_constrained_amplitudes(&b, &basis, &WaveParams::default()), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn fit_objective_beats_projection_and_solves_normal_equations() {
        let basis = small_basis(6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = DMatrix::from_fn(basis.num_vertices(), 30, |_, _| rng.random_range(-1.0..1.0));
        let p = WaveParams { penalty_mu: 5.0, gamma_s: 2.0, r_s: 0.5, dt: 0.1, drive_seed: 9, drive_std: 0.3 };
        let fit = fit_constrained_amplitudes(&b, &basis, &p).unwrap();
        let proj = project_to_modes(&b, &basis, p.dt).unwrap();
        assert!(fit.objective <= fit_objective(&proj, &b, &basis, &p).unwrap());
        assert!(fit.normal_residual < 1e-8);
    }

    #[test]
    fn constraint_residual_monotone_in_penalty() {
        let basis = small_basis(5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = DMatrix::from_fn(basis.num_vertices(), 40, |_, _| rng.random_range(-1.0..1.0));
        let mut last = f64::INFINITY;
        for mu in [1.0, 10.0, 100.0] {
            let p = WaveParams { penalty_mu: mu, gamma_s: 3.0, r_s: 0.4, dt: 0.05, drive_seed: 1, drive_std: 0.1 };
            let fit = fit_constrained_amplitudes(&b, &basis, &p).unwrap();
            assert!(fit.constraint_residual < last);
            last = fit.constraint_residual;
        }
    }

    #[test]
    fn physics_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let phi = DMatrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let field = DynamicField { phi: phi.clone() };
        assert_eq!(physics_loss(&phi, &field).unwrap(), 0.0);
        let shifted = phi.add_scalar(1.0);
        assert!((physics_loss(&shifted, &field).unwrap() - 1.0).abs() < 1e-12);
        let other = DMatrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let mut brute = 0.0;
        for i in 0..4 {
            for j in 0..3 {
                brute += (other[(i, j)] - phi[(i, j)]).powi(2);
            }
        }
        assert!((physics_loss(&other, &field).unwrap() - brute / 12.0).abs() < 1e-12);
        assert!(physics_loss(&DMatrix::zeros(2, 2), &field).is_err());
    }
}
