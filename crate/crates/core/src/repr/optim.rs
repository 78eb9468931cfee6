use crate::error::{Error, Result};

const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub params: Vec<f64>,
    pub loss_before: f64,
    pub loss_after: f64,
    /// Rate actually taken; zero when no decreasing step was found.
    pub rate: f64,
}

/// One full-gradient descent step with Armijo backtracking starting at `rate`.
/// If no trial rate decreases the loss the parameters are returned unchanged.
pub fn grad_step<F>(params: &[f64], objective: &mut F, rate: f64) -> Result<StepOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::InconsistentInput("parameters are not finite".into()));
    }
    let (f0, g) = objective(params)?;
    if g.len() != params.len() {
        return Err(Error::LengthMismatch { left: params.len(), right: g.len() });
    }
    if !f0.is_finite() || g.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    let gg: f64 = g.iter().map(|x| x * x).sum();
    let mut r = rate;
    for _ in 0..MAX_HALVINGS {
        let trial: Vec<f64> = params.iter().zip(&g).map(|(p, d)| p - r * d).collect();
        let (f1, _) = objective(&trial)?;
        if f1.is_finite() && f1 <= f0 - ARMIJO_C * r * gg {
            return Ok(StepOutcome { params: trial, loss_before: f0, loss_after: f1, rate: r });
        }
        r *= 0.5;
    }
    Ok(StepOutcome { params: params.to_vec(), loss_before: f0, loss_after: f0, rate: 0.0 })
}

/// Repeated backtracking steps. After an accepted step the next trial rate
/// doubles, capped at `max_rate`.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub rate: f64,
    pub max_rate: f64,
    pub losses: Vec<f64>,
}

impl Trainer {
    pub fn new(rate: f64) -> Self {
        Trainer { rate, max_rate: rate * 1e3, losses: Vec::new() }
    }

    pub fn run<F>(&mut self, params: &mut Vec<f64>, objective: &mut F, steps: usize) -> Result<()>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        for _ in 0..steps {
            let out = grad_step(params, objective, self.rate)?;
            if self.losses.is_empty() {
                self.losses.push(out.loss_before);
            }
            self.losses.push(out.loss_after);
            if out.rate == 0.0 {
                break;
            }
            *params = out.params;
            self.rate = (out.rate * 2.0).min(self.max_rate);
        }
        Ok(())
    }
}
