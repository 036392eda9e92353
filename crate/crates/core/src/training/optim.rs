//! SGD with momentum and AdamW, both with decoupled weight decay.
//!
//! Weights and gradients are name-keyed maps; optimizer buffers mirror the
//! weight shapes and are created lazily on the first step.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::model::Weights;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWParams {
    pub fn with_lr(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }
}

/// Momentum buffers, one per weight.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    pub velocity: BTreeMap<String, Vec<f64>>,
}

/// First and second moment estimates plus the shared step count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamWState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub step: u64,
}

fn aligned<'a>(weights: &Weights, grads: &'a BTreeMap<String, Tensor>) -> Result<Vec<(&'a String, &'a Tensor)>> {
    let mut out = Vec::with_capacity(grads.len());
    for (name, g) in grads {
        match weights.get(name) {
            None => bail!(Dimension, "gradient for unknown weight {}", name),
            Some(w) if w.shape() != g.shape() => {
                bail!(Dimension, "gradient for {} has shape {:?}, weight has {:?}", name, g.shape(), w.shape())
            }
            _ => out.push((name, g)),
        }
    }
    Ok(out)
}

/// One SGD step. Weights without a gradient entry are left untouched.
pub fn sgd_step(
    weights: &mut Weights,
    grads: &BTreeMap<String, Tensor>,
    state: &mut SgdState,
    p: SgdParams,
) -> Result<()> {
    for (name, g) in aligned(weights, grads)? {
        let w = weights.get_mut(name).expect("aligned").data_mut();
        let v = state.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; w.len()]);
        for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g.data()) {
            *w -= p.lr * p.weight_decay * *w;
            *v = p.momentum * *v + g;
            *w -= p.lr * *v;
        }
    }
    Ok(())
}

/// One AdamW step with bias-corrected moments.
pub fn adamw_step(
    weights: &mut Weights,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamWState,
    p: AdamWParams,
) -> Result<()> {
    let pairs = aligned(weights, grads)?;
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - crate::math::powf(p.beta1, t);
    let c2 = 1.0 - crate::math::powf(p.beta2, t);
    for (name, g) in pairs {
        let w = weights.get_mut(name).expect("aligned").data_mut();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; w.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; w.len()]);
        for i in 0..w.len() {
            let gi = g.data()[i];
            w[i] -= p.lr * p.weight_decay * w[i];
            m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * gi;
            v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            w[i] -= p.lr * mh / (crate::math::sqrt(vh) + p.eps);
        }
    }
    Ok(())
}
