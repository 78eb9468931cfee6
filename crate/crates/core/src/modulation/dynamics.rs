use crate::error::{Error, Result};
use crate::repr::Trainer;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub const LAGS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Relative ridge used for the linear warm start.
    pub ridge: f64,
    pub noise_std: f64,
    /// Scale rollout noise per region by the training residual RMS.
    pub fit_noise: bool,
    pub seed: u64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig { hidden: 16, epochs: 200, learning_rate: 0.05, ridge: 1e-3, noise_std: 1.0, fit_noise: true, seed: 0 }
    }
}

/// `F(u) = W_out tanh(W_in u + b_in) + S u + b_out` on the stacked lags
/// `u = [x_{t-3}; x_{t-2}; x_{t-1}]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsModel {
    pub w_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub w_out: DMatrix<f64>,
    pub skip: DMatrix<f64>,
    pub b_out: DVector<f64>,
    pub noise_std: f64,
    /// Per-region multiplier of the rollout noise.
    pub noise_scale: DVector<f64>,
    pub seed: u64,
}

impl DynamicsModel {
    pub fn zeros(regions: usize, hidden: usize) -> Self {
        DynamicsModel {
            w_in: DMatrix::zeros(hidden, LAGS * regions),
            b_in: DVector::zeros(hidden),
            w_out: DMatrix::zeros(regions, hidden),
            skip: DMatrix::zeros(regions, LAGS * regions),
            b_out: DVector::zeros(regions),
            noise_std: 1.0,
            noise_scale: DVector::from_element(regions, 1.0),
            seed: 0,
        }
    }

    /// Linear model `x_t = A1 x_{t-3} + A2 x_{t-2} + A3 x_{t-1}`.
    pub fn linear(lags: [&DMatrix<f64>; LAGS]) -> Result<Self> {
        let n = lags[0].nrows();
        let mut m = Self::zeros(n, 1);
        for (k, a) in lags.iter().enumerate() {
            if a.shape() != (n, n) {
                return Err(Error::shape(format!("lag matrix {:?}, expected {n}x{n}", a.shape())));
            }
            m.skip.view_mut((0, k * n), (n, n)).copy_from(a);
        }
        Ok(m)
    }

    pub fn regions(&self) -> usize {
        self.b_out.len()
    }

    pub fn hidden(&self) -> usize {
        self.b_in.len()
    }

    pub fn num_params(&self) -> usize {
        self.w_in.len() + self.b_in.len() + self.w_out.len() + self.skip.len() + self.b_out.len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for part in [self.w_in.as_slice(), self.b_in.as_slice(), self.w_out.as_slice(), self.skip.as_slice(), self.b_out.as_slice()] {
            out.extend_from_slice(part);
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::LengthMismatch { left: p.len(), right: self.num_params() });
        }
        let mut off = 0;
        for part in [
            self.w_in.as_mut_slice(),
            self.b_in.as_mut_slice(),
            self.w_out.as_mut_slice(),
            self.skip.as_mut_slice(),
            self.b_out.as_mut_slice(),
        ] {
            let len = part.len();
            part.copy_from_slice(&p[off..off + len]);
            off += len;
        }
        Ok(())
    }

    fn check(&self) -> Result<()> {
        let (n, h) = (self.regions(), self.hidden());
        let ok = self.w_in.shape() == (h, LAGS * n) && self.w_out.shape() == (n, h) && self.skip.shape() == (n, LAGS * n) && self.noise_scale.len() == n;
        if !ok {
            return Err(Error::shape("dynamics model blocks disagree"));
        }
        if self.params().iter().chain(self.noise_scale.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InconsistentInput("dynamics model has non-finite weights".into()));
        }
        Ok(())
    }

    /// Applies `F` to each column of the stacked-lag matrix `u` (3N x n).
    pub fn predict(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        let hidden = self.hidden_act(u);
        let mut out = &self.w_out * hidden + &self.skip * u;
        for mut col in out.column_iter_mut() {
            col += &self.b_out;
        }
        out
    }

    fn hidden_act(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        let mut pre = &self.w_in * u;
        for mut col in pre.column_iter_mut() {
            col += &self.b_in;
        }
        pre.map(f64::tanh)
    }
}

/// Stacked-lag inputs and one-step targets from one series (N x T).
pub fn lagged_design(series: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, t) = series.shape();
    if t < LAGS + 1 {
        return Err(Error::TooShortSeries(t));
    }
    let samples = t - LAGS;
    let mut u = DMatrix::zeros(LAGS * n, samples);
    for s in 0..samples {
        for k in 0..LAGS {
            u.view_mut((k * n, s), (n, 1)).copy_from(&series.column(s + k));
        }
    }
    let y = series.columns(LAGS, samples).into_owned();
    Ok((u, y))
}

/// Mean squared one-step error over samples and regions, with its gradient.
pub fn dynamics_loss_grad(model: &DynamicsModel, u: &DMatrix<f64>, y: &DMatrix<f64>) -> (f64, DynamicsModel) {
    let hidden = model.hidden_act(u);
    let mut resid = &model.w_out * &hidden + &model.skip * u - y;
    for mut col in resid.column_iter_mut() {
        col += &model.b_out;
    }
    let count = resid.len() as f64;
    let loss = resid.norm_squared() / count;
    let d_out = resid * (2.0 / count);
    let d_hidden = (model.w_out.transpose() * &d_out).component_mul(&hidden.map(|a| 1.0 - a * a));
    let grad = DynamicsModel {
        w_in: &d_hidden * u.transpose(),
        b_in: d_hidden.column_sum(),
        w_out: &d_out * hidden.transpose(),
        skip: &d_out * u.transpose(),
        b_out: d_out.column_sum(),
        noise_std: model.noise_std,
        noise_scale: model.noise_scale.clone(),
        seed: model.seed,
    };
    (loss, grad)
}

pub fn dynamics_loss(model: &DynamicsModel, u: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    dynamics_loss_grad(model, u, y).0
}

fn stack_sessions(series: &[DMatrix<f64>]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let first = series.first().ok_or(Error::EmptyList)?;
    let n = first.nrows();
    let mut us = Vec::new();
    let mut ys = Vec::new();
    for s in series {
        if s.nrows() != n {
            return Err(Error::shape(format!("series with {} regions, expected {n}", s.nrows())));
        }
        let (u, y) = lagged_design(s)?;
        us.push(u);
        ys.push(y);
    }
    let total: usize = ys.iter().map(|y| y.ncols()).sum();
    let mut u = DMatrix::zeros(LAGS * n, total);
    let mut y = DMatrix::zeros(n, total);
    let mut off = 0;
    for (ui, yi) in us.iter().zip(&ys) {
        u.columns_mut(off, ui.ncols()).copy_from(ui);
        y.columns_mut(off, yi.ncols()).copy_from(yi);
        off += yi.ncols();
    }
    Ok((u, y))
}

/// Ridge solution of the linear part, with the bias left unpenalized.
fn linear_warm_start(u: &DMatrix<f64>, y: &DMatrix<f64>, ridge: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (p, n) = u.shape();
    let mut aug = DMatrix::from_element(p + 1, n, 1.0);
    aug.rows_mut(0, p).copy_from(u);
    let mut gram = &aug * aug.transpose();
    let scale = (0..p).map(|i| gram[(i, i)]).sum::<f64>() / p.max(1) as f64;
    for i in 0..p {
        gram[(i, i)] += ridge * scale.max(1e-12);
    }
    gram[(p, p)] += 1e-12 * n as f64;
    let rhs = &aug * y.transpose();
    let sol = gram.cholesky().ok_or(Error::SingularCovariance)?.solve(&rhs);
    let w = sol.rows(0, p).transpose();
    let b = sol.row(p).transpose();
    Ok((w, b))
}

/// Fits `F` on one or more sessions: linear ridge warm start, then full-batch
/// gradient descent with backtracking on the whole model.
pub fn train_dynamics_multi(series: &[DMatrix<f64>], cfg: &DynamicsConfig) -> Result<(DynamicsModel, Vec<f64>)> {
    let (u, y) = stack_sessions(series)?;
    let n = y.nrows();
    let mut model = DynamicsModel::zeros(n, cfg.hidden);
    model.noise_std = cfg.noise_std;
    model.seed = cfg.seed;
    let (w, b) = linear_warm_start(&u, &y, cfg.ridge)?;
    model.skip = w;
    model.b_out = b;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = 1.0 / ((LAGS * n) as f64).sqrt();
    model.w_in = DMatrix::from_fn(cfg.hidden, LAGS * n, |_, _| { let v: f64 = StandardNormal.sample(&mut rng); scale * v });

    let mut params = model.params();
    let mut work = model.clone();
    let mut objective = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        work.set_params(p)?;
        let (loss, grad) = dynamics_loss_grad(&work, &u, &y);
        Ok((loss, grad.params()))
    };
    let mut trainer = Trainer::new(cfg.learning_rate);
    trainer.run(&mut params, &mut objective, cfg.epochs)?;
    model.set_params(&params)?;
    if cfg.fit_noise {
        let resid = model.predict(&u) - &y;
        let m = resid.ncols() as f64;
        model.noise_scale = DVector::from_iterator(n, resid.row_iter().map(|r| (r.norm_squared() / m).sqrt()));
    }
    let losses = if trainer.losses.is_empty() { vec![dynamics_loss(&model, &u, &y)] } else { trainer.losses };
    Ok((model, losses))
}

pub fn train_dynamics(series: &DMatrix<f64>, cfg: &DynamicsConfig) -> Result<(DynamicsModel, Vec<f64>)> {
    train_dynamics_multi(std::slice::from_ref(series), cfg)
}

/// Regions perturbed at every step, the intensity, and the seed of the perturbation noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    /// 0-based region indices.
    pub targets: Vec<usize>,
    pub delta: f64,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn validate(&self, regions: usize) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::InconsistentInput("perturbation needs at least one target".into()));
        }
        if let Some(&t) = self.targets.iter().find(|&&t| t >= regions) {
            return Err(Error::TargetOutOfRange { target: t + 1, regions });
        }
        let mut sorted = self.targets.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.targets.len() {
            return Err(Error::InconsistentInput("duplicate perturbation target".into()));
        }
        if !self.delta.is_finite() {
            return Err(Error::InconsistentInput("perturbation intensity is not finite".into()));
        }
        Ok(())
    }
}

/// Iterates `x_t = F(x_{t-3}, x_{t-2}, x_{t-1}) + noise_std * noise_scale .* eps_t` from the
/// three columns of `init` (oldest first). Returns N x steps.
pub fn rollout(model: &DynamicsModel, init: &DMatrix<f64>, steps: usize, noise_std: f64, seed: u64) -> Result<DMatrix<f64>> {
    simulate(model, init, steps, noise_std, seed, None)
}

/// As [`rollout`], with `delta * e_i` added to the last-lag input of every
/// target at every step. `e` comes from its own stream seeded by `spec.seed`,
/// so the plain rollout noise is unaffected.
pub fn perturbed_rollout(
    model: &DynamicsModel,
    init: &DMatrix<f64>,
    steps: usize,
    noise_std: f64,
    seed: u64,
    spec: &PerturbationSpec,
) -> Result<DMatrix<f64>> {
    spec.validate(model.regions())?;
    simulate(model, init, steps, noise_std, seed, Some(spec))
}

fn simulate(
    model: &DynamicsModel,
    init: &DMatrix<f64>,
    steps: usize,
    noise_std: f64,
    seed: u64,
    spec: Option<&PerturbationSpec>,
) -> Result<DMatrix<f64>> {
    model.check()?;
    let n = model.regions();
    if init.shape() != (n, LAGS) {
        return Err(Error::shape(format!("initial state {:?}, expected {n}x{LAGS}", init.shape())));
    }
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::InconsistentInput(format!("noise std {noise_std}")));
    }
    let mut noise = ChaCha8Rng::seed_from_u64(seed);
    let mut pert_rng = spec.map(|s| ChaCha8Rng::seed_from_u64(s.seed));
    let mut window: Vec<DVector<f64>> = (0..LAGS).map(|k| init.column(k).into_owned()).collect();
    let mut out = DMatrix::zeros(n, steps);
    let mut u = DMatrix::zeros(LAGS * n, 1);
    for step in 0..steps {
        for (k, x) in window.iter().enumerate() {
            u.view_mut((k * n, 0), (n, 1)).copy_from(x);
        }
        if let (Some(spec), Some(rng)) = (spec, pert_rng.as_mut()) {
            let e: Vec<f64> = (0..n).map(|_| -> f64 { StandardNormal.sample(&mut *rng) }).collect();
            if spec.delta != 0.0 {
                for &i in &spec.targets {
                    u[((LAGS - 1) * n + i, 0)] += spec.delta * e[i];
                }
            }
        }
        let mut x = model.predict(&u).column(0).into_owned();
        for (v, s) in x.iter_mut().zip(model.noise_scale.iter()) {
            let eps: f64 = StandardNormal.sample(&mut noise);
            *v += noise_std * s * eps;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step });
        }
        out.set_column(step, &x);
        window.remove(0);
        window.push(x);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::repr::testutil::{fd_gradient, rel_error};
    use rand::Rng;

    fn planted_ar(n: usize, t: usize, noise: f64, seed: u64) -> (DynamicsModel, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mk = |s: f64| DMatrix::from_fn(n, n, |i, j| if i == j { s } else { rng.random_range(-0.05..0.05) });
        let (a1, a2, a3) = (mk(0.1), mk(-0.2), mk(0.5));
        let model = DynamicsModel::linear([&a1, &a2, &a3]).unwrap();
        let init = DMatrix::zeros(n, LAGS);
        let series = rollout(&model, &init, t, noise, seed + 1).unwrap();
        (model, series)
    }

    #[test]
    fn design_layout() {
        let s = DMatrix::from_fn(2, 5, |i, j| (10 * i + j) as f64);
        let (u, y) = lagged_design(&s).unwrap();
        assert_eq!(u.shape(), (6, 2));
        assert_eq!(u.column(0).as_slice(), &[0.0, 10.0, 1.0, 11.0, 2.0, 12.0]);
        assert_eq!(y.column(1).as_slice(), &[4.0, 14.0]);
        assert!(matches!(lagged_design(&DMatrix::zeros(2, 3)), Err(Error::TooShortSeries(3))));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, h, t) = (3, 4, 12);
        let s = DMatrix::from_fn(n, t, |_, _| rng.random_range(-1.0..1.0));
        let (u, y) = lagged_design(&s).unwrap();
        let mut model = DynamicsModel::zeros(n, h);
        let p: Vec<f64> = (0..model.num_params()).map(|_| rng.random_range(-0.5..0.5)).collect();
        model.set_params(&p).unwrap();
        let (_, g) = dynamics_loss_grad(&model, &u, &y);
        let mut work = model.clone();
        let fd = fd_gradient(
            &mut |q| {
                work.set_params(q).unwrap();
                dynamics_loss(&work, &u, &y)
            },
            &p,
            1e-6,
        );
        assert!(rel_error(&g.params(), &fd) < 1e-6);
    }

    #[test]
    fn recovers_planted_ar_to_noise_floor() {
        let sigma = 0.5;
        let (_, series) = planted_ar(4, 3000, sigma, 9);
        let cfg = DynamicsConfig { hidden: 6, epochs: 30, ..Default::default() };
        let (model, losses) = train_dynamics(&series, &cfg).unwrap();
        assert!(losses.last().unwrap() <= &losses[0]);
        let (u, y) = lagged_design(&series).unwrap();
        let mse = dynamics_loss(&model, &u, &y);
        assert!((mse / (sigma * sigma) - 1.0).abs() < 0.1, "mse {mse}");
        assert!(model.noise_scale.iter().all(|s| (s / sigma - 1.0).abs() < 0.1));
    }

    #[test]
    fn constant_series_is_fit_exactly() {
        let series = DMatrix::from_element(3, 20, 0.7);
        let (model, _) = train_dynamics(&series, &DynamicsConfig { epochs: 20, ..Default::default() }).unwrap();
        let (u, y) = lagged_design(&series).unwrap();
        assert!(dynamics_loss(&model, &u, &y) < 1e-8);
    }

    #[test]
    fn rollout_basics() {
        let eye = DMatrix::identity(3, 3);
        let zero = DMatrix::zeros(3, 3);
        let model = DynamicsModel::linear([&zero, &zero, &eye]).unwrap();
        let init = DMatrix::from_fn(3, 3, |i, _| i as f64 + 1.0);
        let traj = rollout(&model, &init, 10, 0.0, 0).unwrap();
        for c in traj.column_iter() {
            assert_eq!(c.as_slice(), &[1.0, 2.0, 3.0]);
        }
        let a = rollout(&model, &init, 10, 0.3, 5).unwrap();
        assert_eq!(a, rollout(&model, &init, 10, 0.3, 5).unwrap());
        assert_ne!(a, rollout(&model, &init, 10, 0.3, 6).unwrap());
        assert!(rollout(&model, &DMatrix::zeros(2, 3), 3, 0.0, 0).is_err());
    }

    #[test]
    fn rollout_noise_has_requested_variance() {
        let (model, _) = planted_ar(3, 10, 0.0, 2);
        let sigma = 0.4;
        let steps = 10_000;
        let traj = rollout(&model, &DMatrix::zeros(3, 3), steps, sigma, 17).unwrap();
        let mut full = DMatrix::zeros(3, steps + 3);
        full.columns_mut(3, steps).copy_from(&traj);
        let (u, y) = lagged_design(&full).unwrap();
        let resid = y - model.predict(&u);
        let var = resid.norm_squared() / resid.len() as f64;
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.1);
    }

    #[test]
    fn explosive_model_reports_step() {
        let big = DMatrix::identity(2, 2) * 1e200;
        let zero = DMatrix::zeros(2, 2);
        let model = DynamicsModel::linear([&zero, &zero, &big]).unwrap();
        let init = DMatrix::from_element(2, 3, 1.0);
        assert!(matches!(rollout(&model, &init, 10, 0.0, 0), Err(Error::NonFiniteState { step: 1 })));
    }

    #[test]
    fn zero_delta_is_the_plain_rollout() {
        let (model, series) = planted_ar(4, 50, 0.3, 3);
        let init = series.columns(0, 3).into_owned();
        let plain = rollout(&model, &init, 40, 0.3, 8).unwrap();
        let spec = PerturbationSpec { targets: vec![0, 2], delta: 0.0, seed: 99 };
        let pert = perturbed_rollout(&model, &init, 40, 0.3, 8, &spec).unwrap();
        assert!(plain.iter().zip(pert.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let bad = PerturbationSpec { targets: vec![4], delta: 1.0, seed: 0 };
        assert!(matches!(perturbed_rollout(&model, &init, 5, 0.3, 8, &bad), Err(Error::TargetOutOfRange { target: 5, regions: 4 })));
        let empty = PerturbationSpec { targets: vec![], delta: 1.0, seed: 0 };
        assert!(perturbed_rollout(&model, &init, 5, 0.3, 8, &empty).is_err());
    }

    #[test]
    fn linear_shifts_superpose() {
        let (model, series) = planted_ar(4, 50, 0.3, 3);
        let init = series.columns(0, 3).into_owned();
        let plain = rollout(&model, &init, 30, 0.3, 8).unwrap();
        let shift = |targets: Vec<usize>| {
            let spec = PerturbationSpec { targets, delta: 0.7, seed: 21 };
            perturbed_rollout(&model, &init, 30, 0.3, 8, &spec).unwrap() - &plain
        };
        let all = shift(vec![0, 1, 2, 3]);
        let sum = (0..4).map(|i| shift(vec![i])).fold(DMatrix::zeros(4, 30), |acc, s| acc + s);
        assert!((all - sum).amax() < 1e-10);
    }
}
