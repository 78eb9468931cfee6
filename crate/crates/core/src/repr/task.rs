use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskLoss {
    #[default]
    CrossEntropy,
    Mse,
}

/// Mean negative log-probability of the true classes. `probs` holds one
/// probability row per sample.
pub fn cross_entropy(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::LengthMismatch { left: probs.len(), right: labels.len() });
    }
    if probs.is_empty() {
        return Err(Error::EmptyList);
    }
    let mut total = 0.0;
    for (row, &y) in probs.iter().zip(labels) {
        let p = *row.get(y).ok_or_else(|| Error::shape(format!("label {y} outside {} classes", row.len())))?;
        total -= p.max(f64::MIN_POSITIVE).ln();
    }
    Ok(total / probs.len() as f64)
}

pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::LengthMismatch { left: pred.len(), right: target.len() });
    }
    if pred.is_empty() {
        return Err(Error::EmptyList);
    }
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64)
}

/// Loss and its gradient with respect to every probability entry.
pub fn cross_entropy_grad(probs: &[Vec<f64>], labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    let loss = cross_entropy(probs, labels)?;
    let n = probs.len() as f64;
    let grad = probs
        .iter()
        .zip(labels)
        .map(|(row, &y)| {
            let mut g = vec![0.0; row.len()];
            if row[y] > f64::MIN_POSITIVE {
                g[y] = -1.0 / (n * row[y]);
            }
            g
        })
        .collect();
    Ok((loss, grad))
}

/// Loss and its gradient with respect to `pred`.
pub fn mse_loss_grad(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    let loss = mse_loss(pred, target)?;
    let n = pred.len() as f64;
    Ok((loss, pred.iter().zip(target).map(|(a, b)| 2.0 * (a - b) / n).collect()))
}

/// `task + lambda1 * seg`.
///
/// The task term is a cross-entropy or squared error and must be non-negative.
/// The segmentation term is an energy built from normalised log-densities,
/// which may legitimately dip below zero, so it is only required to be finite.
pub fn joint_loss(task: f64, seg: f64, lambda1: f64) -> Result<f64> {
    if task < 0.0 || !task.is_finite() {
        return Err(Error::NegativeLoss(task));
    }
    if !seg.is_finite() {
        return Err(Error::NegativeLoss(seg));
    }
    Ok(task + lambda1 * seg)
}
