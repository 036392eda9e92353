//! Regression and multi-label classification losses.

use alloc::vec;

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[BCE_CLAMP, 1 − BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

/// Number of pre-training classes: 14 thoracic findings plus COVID-19 at
/// the last index.
pub const N_CLASSES: usize = 15;
pub const COVID_INDEX: usize = 14;

/// Mean smooth-L1 over all elements. Quadratic inside `|y − ŷ| < β`, linear
/// outside, with matching value and slope at the boundary.
pub fn smooth_l1(y: &Tensor, yhat: &Tensor, beta: f64) -> Result<f64> {
    if !(beta > 0.0) || !beta.is_finite() {
        bail!(Parameter, "smooth-L1 beta must be positive, got {}", beta);
    }
    if y.shape() != yhat.shape() {
        bail!(Dimension, "smooth-L1 shapes differ: {:?} vs {:?}", y.shape(), yhat.shape());
    }
    let total: f64 = y.data().iter().zip(yhat.data()).map(|(a, b)| smooth_l1_elem(a - b, beta)).sum();
    Ok(total / y.len() as f64)
}

pub(crate) fn smooth_l1_elem(diff: f64, beta: f64) -> f64 {
    let a = diff.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
}

/// Mean binary cross-entropy over all entries.
pub fn bce_multilabel(probs: &Tensor, target: &Tensor) -> Result<f64> {
    if probs.shape() != target.shape() {
        bail!(Dimension, "BCE shapes differ: {:?} vs {:?}", probs.shape(), target.shape());
    }
    check_binary(target)?;
    let total: f64 = probs
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = clamp_prob(p);
            -(t * crate::math::ln(p) + (1.0 - t) * crate::math::ln(1.0 - p))
        })
        .sum();
    Ok(total / probs.len() as f64)
}

pub fn check_binary(target: &Tensor) -> Result<()> {
    if let Some(bad) = target.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
        bail!(Data, "multi-label targets must be 0 or 1, found {}", bad);
    }
    Ok(())
}

/// Indicator vector over the 15 classes. The empty set is the normal case.
pub fn label_encode(present: &[usize]) -> Result<Tensor> {
    let mut v = vec![0.0; N_CLASSES];
    for &c in present {
        if c >= N_CLASSES {
            bail!(Data, "class index {} out of range 0..{}", c, N_CLASSES);
        }
        v[c] = 1.0;
    }
    Ok(Tensor::vector(v))
}
