use super::autoencoder::{encode, pca_init, stage1_loss_grad};
use super::diffusion::stage2_loss_grad;
use super::optim::Trainer;
use super::pattern::{extract_pattern, stage3_loss_grad};
use super::{ParamVec, ReprConfig, ReprModel};
use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// Loss traces of the three pretraining stages.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainTrace {
    pub stage1: Vec<f64>,
    pub stage2: Vec<f64>,
    pub stage3: Vec<f64>,
}

/// Trains the autoencoder on `b`, then the denoiser on the frozen latents, then
/// the pattern decoder (initialised from the decoder) on the extracted pattern.
/// With `warm_start` the autoencoder begins at the principal subspace of `b`.
pub fn pretrain(b: &DMatrix<f64>, cfg: &ReprConfig, warm_start: bool) -> Result<(ReprModel, PretrainTrace)> {
    if cfg.latent_dim == 0 || cfg.tokens == 0 {
        return Err(Error::InfeasibleConfig("latent dimension and token count must be positive".into()));
    }
    let schedule = cfg.schedule()?;
    let mut model = ReprModel::random(b.nrows(), cfg);
    if warm_start {
        let (enc, dec) = pca_init(b, cfg.latent_dim);
        model.encoder = enc;
        model.decoder = dec;
    }
    let mut trace = PretrainTrace::default();

    let mut params = model.encoder.to_vec();
    model.decoder.write_params(&mut params);
    let mut stage1 = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut m = model.clone();
        let rest = m.encoder.read_params(p);
        m.decoder.read_params(rest);
        let g = stage1_loss_grad(b, &m)?;
        let mut v = g.encoder.to_vec();
        g.decoder.write_params(&mut v);
        Ok((g.loss, v))
    };
    let mut trainer = Trainer::new(cfg.learning_rate);
    trainer.run(&mut params, &mut stage1, cfg.stage1_steps)?;
    trace.stage1 = trainer.losses;
    let rest = model.encoder.read_params(&params);
    model.decoder.read_params(rest);

    let z0 = encode(b, &model.encoder, model.activation)?;
    let mut params = model.denoiser.to_vec();
    let mut stage2 = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut den = model.denoiser.clone();
        den.set_from(p);
        let (loss, g) = stage2_loss_grad(&z0, &schedule, &den, cfg.seed)?;
        Ok((loss, g.to_vec()))
    };
    let mut trainer = Trainer::new(cfg.learning_rate);
    trainer.run(&mut params, &mut stage2, cfg.stage2_steps)?;
    trace.stage2 = trainer.losses;
    model.denoiser.set_from(&params);

    model.pattern_decoder = model.decoder.clone();
    let pattern = extract_pattern(b, &model, &schedule, cfg.t_star(), cfg.seed)?;
    let mut params = model.pattern_decoder.to_vec();
    let mut stage3 = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut d1 = model.pattern_decoder.clone();
        d1.set_from(p);
        let g = stage3_loss_grad(b, &pattern, &d1)?;
        Ok((g.loss, g.d1.to_vec()))
    };
    let mut trainer = Trainer::new(cfg.learning_rate);
    trainer.run(&mut params, &mut stage3, cfg.stage3_steps)?;
    trace.stage3 = trainer.losses;
    model.pattern_decoder.set_from(&params);

    Ok((model, trace))
}
