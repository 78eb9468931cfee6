//! Toy-scale representation model: affine encoder/decoder, a latent
//! denoising-diffusion perceptron, pattern extraction and the pattern decoder.
//!
//! All gradients are derived by hand and checked against central finite
//! differences in the tests.

mod autoencoder;
mod diffusion;
mod optim;
mod pattern;
mod task;
mod training;

pub use autoencoder::{decode, encode, pca_init, stage1_loss, stage1_loss_grad, Stage1Grad};
pub use diffusion::{
    forward_diffuse, stage2_draws, stage2_loss, stage2_loss_grad, time_embedding, DiffusionSchedule, Stage2Draw,
};
pub use optim::{grad_step, StepOutcome, Trainer};
pub use pattern::{
    decode_pattern, extract_pattern, fine_tune, pattern_backprop, pattern_reconstruction, physics_objective,
    stage3_loss, stage3_loss_grad, FineTuneConfig, FreezeMask, PatternGrad, PatternRepresentation,
};
pub use task::{cross_entropy, cross_entropy_grad, joint_loss, mse_loss, mse_loss_grad, TaskLoss};
pub use training::{pretrain, PretrainTrace};

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Vertex x time signal matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BoldMatrix {
    pub data: DMatrix<f64>,
    /// Sampling interval, s.
    pub tr: f64,
}

impl BoldMatrix {
    pub fn new(data: DMatrix<f64>, tr: f64) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::shape("signal matrix must have at least one row and column"));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InconsistentInput("signal matrix contains non-finite values".into()));
        }
        Ok(BoldMatrix { data, tr })
    }

    pub fn vertices(&self) -> usize {
        self.data.nrows()
    }

    pub fn time_points(&self) -> usize {
        self.data.ncols()
    }

    /// Rows shifted to zero mean and scaled to unit variance (constant rows are left at zero).
    pub fn standardized(&self) -> BoldMatrix {
        let mut d = self.data.clone();
        let t = d.ncols() as f64;
        for mut row in d.row_iter_mut() {
            let mean = row.sum() / t;
            row.add_scalar_mut(-mean);
            let sd = (row.norm_squared() / t).sqrt();
            if sd > 0.0 {
                row /= sd;
            }
        }
        BoldMatrix { data: d, tr: self.tr }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Identity,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Column-wise affine map `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Affine {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Affine { w: DMatrix::zeros(out_dim, in_dim), b: DVector::zeros(out_dim) }
    }

    pub fn random(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (in_dim.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, scale).expect("finite scale");
        Affine { w: DMatrix::from_fn(out_dim, in_dim, |_, _| normal.sample(rng)), b: DVector::zeros(out_dim) }
    }

    pub fn identity(n: usize) -> Self {
        Affine { w: DMatrix::identity(n, n), b: DVector::zeros(n) }
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = &self.w * x;
        for mut col in y.column_iter_mut() {
            col += &self.b;
        }
        y
    }
}

/// Flattening of trainable parameters into a single vector.
pub trait ParamVec {
    fn num_params(&self) -> usize;
    fn write_params(&self, out: &mut Vec<f64>);
    /// Reads parameters from the front of `src`, returning the remainder.
    fn read_params<'a>(&mut self, src: &'a [f64]) -> &'a [f64];

    fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        self.write_params(&mut v);
        v
    }

    fn set_from(&mut self, src: &[f64]) {
        let rest = self.read_params(src);
        debug_assert!(rest.is_empty());
    }
}

fn write_matrix(m: &DMatrix<f64>, out: &mut Vec<f64>) {
    out.extend_from_slice(m.as_slice());
}

fn read_matrix<'a>(m: &mut DMatrix<f64>, src: &'a [f64]) -> &'a [f64] {
    let n = m.len();
    m.as_mut_slice().copy_from_slice(&src[..n]);
    &src[n..]
}

impl ParamVec for Affine {
    fn num_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        write_matrix(&self.w, out);
        out.extend_from_slice(self.b.as_slice());
    }

    fn read_params<'a>(&mut self, src: &'a [f64]) -> &'a [f64] {
        let src = read_matrix(&mut self.w, src);
        let n = self.b.len();
        self.b.as_mut_slice().copy_from_slice(&src[..n]);
        &src[n..]
    }
}

/// One-hidden-layer noise predictor conditioned on a sinusoidal step embedding:
/// `eps_hat = W_out act(W_in z + W_time emb(t) + b_hidden) + b_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub w_in: DMatrix<f64>,
    pub w_time: DMatrix<f64>,
    pub b_hidden: DVector<f64>,
    pub w_out: DMatrix<f64>,
    pub b_out: DVector<f64>,
    pub activation: Activation,
}

impl Denoiser {
    pub fn zeros(latent: usize, hidden: usize, embed: usize, activation: Activation) -> Self {
        Denoiser {
            w_in: DMatrix::zeros(hidden, latent),
            w_time: DMatrix::zeros(hidden, embed),
            b_hidden: DVector::zeros(hidden),
            w_out: DMatrix::zeros(latent, hidden),
            b_out: DVector::zeros(latent),
            activation,
        }
    }

    pub fn random(latent: usize, hidden: usize, embed: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let inp = Affine::random(hidden, latent + embed, rng);
        let out = Affine::random(latent, hidden, rng);
        Denoiser {
            w_in: inp.w.columns(0, latent).into_owned(),
            w_time: inp.w.columns(latent, embed).into_owned(),
            b_hidden: DVector::from_fn(hidden, |i, _| 0.1 * ((i as f64) * 0.7).sin()),
            w_out: out.w,
            b_out: out.b,
            activation,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.w_in.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_in.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.w_time.ncols()
    }

    /// Hidden activations for latent columns `z` at diffusion step `step`.
    pub fn hidden(&self, z: &DMatrix<f64>, step: usize) -> DMatrix<f64> {
        let emb = time_embedding(step, self.embed_dim());
        let bias = &self.w_time * emb + &self.b_hidden;
        let mut pre = &self.w_in * z;
        for mut col in pre.column_iter_mut() {
            col += &bias;
        }
        pre.map(|x| self.activation.apply(x))
    }

    pub fn predict(&self, z: &DMatrix<f64>, step: usize) -> DMatrix<f64> {
        let h = self.hidden(z, step);
        let mut out = &self.w_out * h;
        for mut col in out.column_iter_mut() {
            col += &self.b_out;
        }
        out
    }
}

impl ParamVec for Denoiser {
    fn num_params(&self) -> usize {
        self.w_in.len() + self.w_time.len() + self.b_hidden.len() + self.w_out.len() + self.b_out.len()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        write_matrix(&self.w_in, out);
        write_matrix(&self.w_time, out);
        out.extend_from_slice(self.b_hidden.as_slice());
        write_matrix(&self.w_out, out);
        out.extend_from_slice(self.b_out.as_slice());
    }

    fn read_params<'a>(&mut self, src: &'a [f64]) -> &'a [f64] {
        let src = read_matrix(&mut self.w_in, src);
        let src = read_matrix(&mut self.w_time, src);
        let n = self.b_hidden.len();
        self.b_hidden.as_mut_slice().copy_from_slice(&src[..n]);
        let src = read_matrix(&mut self.w_out, &src[n..]);
        let n = self.b_out.len();
        self.b_out.as_mut_slice().copy_from_slice(&src[..n]);
        &src[n..]
    }
}

/// Dimensions and training settings of the representation model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReprConfig {
    pub latent_dim: usize,
    pub tokens: usize,
    pub time_embed_dim: usize,
    pub activation: Activation,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub learning_rate: f64,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage3_steps: usize,
    pub seed: u64,
}

impl Default for ReprConfig {
    fn default() -> Self {
        ReprConfig {
            latent_dim: 8,
            tokens: 8,
            time_embed_dim: 8,
            activation: Activation::Identity,
            diffusion_steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
            learning_rate: 0.05,
            stage1_steps: 30,
            stage2_steps: 30,
            stage3_steps: 10,
            seed: 0,
        }
    }
}

impl ReprConfig {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
    }

    pub fn hidden_dim(&self) -> usize {
        self.tokens * self.latent_dim
    }

    /// Extraction step `ceil(T_steps / 2)`.
    pub fn t_star(&self) -> usize {
        self.diffusion_steps.div_ceil(2).max(1)
    }
}

/// Encoder, decoder, denoiser and pattern decoder D1.
#[derive(Debug, Clone, PartialEq)]
pub struct ReprModel {
    pub encoder: Affine,
    pub decoder: Affine,
    pub denoiser: Denoiser,
    pub pattern_decoder: Affine,
    pub activation: Activation,
}

impl ReprModel {
    pub fn random(vertices: usize, cfg: &ReprConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.latent_dim;
        let encoder = Affine::random(d, vertices, &mut rng);
        let decoder = Affine::random(vertices, d, &mut rng);
        let denoiser = Denoiser::random(d, cfg.hidden_dim(), cfg.time_embed_dim, cfg.activation, &mut rng);
        let pattern_decoder = decoder.clone();
        ReprModel { encoder, decoder, denoiser, pattern_decoder, activation: cfg.activation }
    }

    pub fn vertices(&self) -> usize {
        self.encoder.in_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.out_dim()
    }

    pub fn check(&self) -> Result<()> {
        let d = self.latent_dim();
        let v = self.vertices();
        let ok = self.decoder.w.shape() == (v, d)
            && self.pattern_decoder.w.shape() == (v, d)
            && self.denoiser.latent_dim() == d
            && self.denoiser.w_out.nrows() == d;
        if ok {
            Ok(())
        } else {
            Err(Error::shape("representation model components have inconsistent dimensions"))
        }
    }
}
