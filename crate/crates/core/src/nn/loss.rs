//! Cross-entropy losses and their gradients with respect to the
//! probabilities they consume.
//!
//! Categorical cross-entropy floors probabilities at `PROB_FLOOR`; binary
//! cross-entropy clamps them to `[PROB_FLOOR, 1 - PROB_FLOOR]`. A zero
//! probability at a target therefore yields a large finite loss, never NaN.

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const PROB_FLOOR: f64 = 1e-12;

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::dim(format!(
            "prediction shape {:?} vs target shape {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_categorical(probs: &Tensor, targets: &Tensor) -> Result<()> {
    same_shape(probs, targets)?;
    for (i, (p, t)) in probs.iter_rows().zip(targets.iter_rows()).enumerate() {
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("probability row {i} sums to {s}")));
        }
        let ones = t.iter().filter(|&&v| v == 1.0).count();
        let zeros = t.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != t.len() {
            return Err(Error::invalid(format!("target row {i} is not one-hot")));
        }
    }
    Ok(())
}

/// Mean over rows of `-log p[target]`.
pub fn categorical_cross_entropy(probs: &Tensor, targets: &Tensor) -> Result<f64> {
    check_categorical(probs, targets)?;
    let n = probs.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let total: f64 = probs
        .data()
        .iter()
        .zip(targets.data())
        .filter(|(_, &t)| t == 1.0)
        .map(|(&p, _)| -p.max(PROB_FLOOR).ln())
        .sum();
    Ok(total / n as f64)
}

pub fn categorical_cross_entropy_grad(probs: &Tensor, targets: &Tensor) -> Result<Tensor> {
    check_categorical(probs, targets)?;
    let n = probs.rows().max(1) as f64;
    let data = probs
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&p, &t)| if t == 1.0 { -1.0 / (p.max(PROB_FLOOR) * n) } else { 0.0 })
        .collect();
    Tensor::new(probs.shape().to_vec(), data)
}

fn check_binary(preds: &Tensor, targets: &Tensor) -> Result<()> {
    same_shape(preds, targets)?;
    if let Some(q) = targets.data().iter().find(|q| !(0.0..=1.0).contains(*q)) {
        return Err(Error::invalid(format!("binary target {q} outside [0, 1]")));
    }
    Ok(())
}

/// Binary cross-entropy of one prediction against one soft target.
#[inline]
pub fn bce_term(p: f64, q: f64) -> f64 {
    let p = clamp_prob(p);
    -(q * p.ln() + (1.0 - q) * (1.0 - p).ln())
}

/// Summed over outputs, averaged over rows.
pub fn binary_cross_entropy(preds: &Tensor, targets: &Tensor) -> Result<f64> {
    check_binary(preds, targets)?;
    let n = preds.rows();
    if n == 0 {
        return Ok(0.0);
    }
    Ok(bce_sum(preds.data(), targets.data()) / n as f64)
}

pub(crate) fn bce_sum(preds: &[f64], targets: &[f64]) -> f64 {
    preds.iter().zip(targets).map(|(&p, &q)| bce_term(p, q)).sum()
}

/// Gradient of [`binary_cross_entropy`] with respect to the predictions.
pub fn binary_cross_entropy_grad(preds: &Tensor, targets: &Tensor) -> Result<Tensor> {
    check_binary(preds, targets)?;
    let n = preds.rows().max(1) as f64;
    let data = preds
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&p, &q)| {
            let p = clamp_prob(p);
            (p - q) / (p * (1.0 - p) * n)
        })
        .collect();
    Tensor::new(preds.shape().to_vec(), data)
}

/// Gradient of [`binary_cross_entropy`] with respect to the logits that
/// produced `preds` through a sigmoid: `(p - q) / n`.
pub fn binary_cross_entropy_logit_grad(preds: &Tensor, targets: &Tensor, n: usize) -> Result<Tensor> {
    check_binary(preds, targets)?;
    let n = n.max(1) as f64;
    let data = preds
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&p, &q)| (p - q) / n)
        .collect();
    Tensor::new(preds.shape().to_vec(), data)
}
