use super::Denoiser;
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Variance schedule of the forward noising process. Step `t` runs over
/// `1..=steps` and uses `alphas_bar[t - 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alphas_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InfeasibleConfig("diffusion schedule needs at least one step".into()));
        }
        if betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::InfeasibleConfig("betas must lie in [0, 1)".into()));
        }
        let mut acc = 1.0;
        let alphas_bar = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(DiffusionSchedule { betas, alphas_bar })
    }

    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InfeasibleConfig("diffusion schedule needs at least one step".into()));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange { step: t, max: self.steps() });
        }
        Ok(self.alphas_bar[t - 1])
    }
}

/// `z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
pub fn forward_diffuse(z0: &DMatrix<f64>, t: usize, eps: &DMatrix<f64>, schedule: &DiffusionSchedule) -> Result<DMatrix<f64>> {
    if z0.shape() != eps.shape() {
        return Err(Error::shape(format!("noise shape {:?} differs from latent shape {:?}", eps.shape(), z0.shape())));
    }
    let ab = schedule.alpha_bar(t)?;
    Ok(z0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// Sinusoidal embedding of a diffusion step.
pub fn time_embedding(step: usize, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |j, _| {
        let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / dim.max(1) as f64);
        let x = step as f64 * freq;
        if j % 2 == 0 {
            x.sin()
        } else {
            x.cos()
        }
    })
}

/// Per-column step and noise used by the stage-2 objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Draw {
    pub steps: Vec<usize>,
    pub eps: DMatrix<f64>,
}

pub fn stage2_draws(latent: usize, columns: usize, schedule: &DiffusionSchedule, seed: u64) -> Stage2Draw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut steps = Vec::with_capacity(columns);
    let mut eps = DMatrix::zeros(latent, columns);
    for j in 0..columns {
        steps.push(rng.random_range(1..=schedule.steps()));
        for i in 0..latent {
            eps[(i, j)] = rng.sample(StandardNormal);
        }
    }
    Stage2Draw { steps, eps }
}

struct Stage2Forward {
    zt: DMatrix<f64>,
    emb: DMatrix<f64>,
    hidden: DMatrix<f64>,
    resid: DMatrix<f64>,
}

fn stage2_forward(z0: &DMatrix<f64>, schedule: &DiffusionSchedule, den: &Denoiser, draw: &Stage2Draw) -> Result<Stage2Forward> {
    if z0.nrows() != den.latent_dim() {
        return Err(Error::shape(format!("denoiser expects latent dim {}, got {}", den.latent_dim(), z0.nrows())));
    }
    let cols = z0.ncols();
    let mut zt = DMatrix::zeros(z0.nrows(), cols);
    let mut emb = DMatrix::zeros(den.embed_dim(), cols);
    for j in 0..cols {
        let ab = schedule.alpha_bar(draw.steps[j])?;
        let col = z0.column(j) * ab.sqrt() + draw.eps.column(j) * (1.0 - ab).sqrt();
        zt.set_column(j, &col);
        emb.set_column(j, &time_embedding(draw.steps[j], den.embed_dim()));
    }
    let mut pre = &den.w_in * &zt + &den.w_time * &emb;
    for mut col in pre.column_iter_mut() {
        col += &den.b_hidden;
    }
    let hidden = pre.map(|x| den.activation.apply(x));
    let mut out = &den.w_out * &hidden;
    for mut col in out.column_iter_mut() {
        col += &den.b_out;
    }
    let resid = out - &draw.eps;
    Ok(Stage2Forward { zt, emb, hidden, resid })
}

/// Mean squared error between the injected noise and the denoiser's prediction,
/// with one `(t, eps)` draw per latent column.
pub fn stage2_loss(z0: &DMatrix<f64>, schedule: &DiffusionSchedule, den: &Denoiser, seed: u64) -> Result<f64> {
    let draw = stage2_draws(z0.nrows(), z0.ncols(), schedule, seed);
    let fwd = stage2_forward(z0, schedule, den, &draw)?;
    Ok(fwd.resid.norm_squared() / fwd.resid.len() as f64)
}

/// Loss and gradient with respect to every denoiser parameter.
pub fn stage2_loss_grad(z0: &DMatrix<f64>, schedule: &DiffusionSchedule, den: &Denoiser, seed: u64) -> Result<(f64, Denoiser)> {
    let draw = stage2_draws(z0.nrows(), z0.ncols(), schedule, seed);
    let fwd = stage2_forward(z0, schedule, den, &draw)?;
    let n = fwd.resid.len() as f64;
    let loss = fwd.resid.norm_squared() / n;
    let g = fwd.resid * (2.0 / n);
    let mut dpre = den.w_out.transpose() * &g;
    dpre.zip_apply(&fwd.hidden, |d, y| *d *= den.activation.derivative_from_output(y));
    let grad = Denoiser {
        w_in: &dpre * fwd.zt.transpose(),
        w_time: &dpre * fwd.emb.transpose(),
        b_hidden: super::autoencoder::row_sums(&dpre),
        w_out: &g * fwd.hidden.transpose(),
        b_out: super::autoencoder::row_sums(&g),
        activation: den.activation,
    };
    Ok((loss, grad))
}
