//! Pre-training on the proxy set and severity fine-tuning.

pub mod loss;
pub mod optim;

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attention::Dropout;
use crate::autodiff::Graph;
use crate::data::{Dataset, DatasetKind};
use crate::error::{bail, Result};
use crate::model::{self, BoundModel, Checkpoint, HeadKind, Phase};
use crate::rng::{self, stream};
use crate::tensor::Tensor;
use optim::{AdamWParams, AdamWState, SgdParams, SgdState};

fn default_batch() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { lr: 1e-6, weight_decay: 0.01, epochs: 100, batch_size: default_batch(), beta1: 0.9, beta2: 0.999, eps: 1e-8, seed: 0 }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_common(self.lr, self.weight_decay, self.batch_size)?;
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            bail!(Config, "AdamW betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWParams {
        AdamWParams { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub dropout: f64,
    pub loss_beta: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 3e-5,
            epochs: 400,
            lr_decay: 0.98,
            decay_every: 2,
            dropout: 0.1,
            loss_beta: 1.0,
            batch_size: default_batch(),
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        check_common(self.lr, self.weight_decay, self.batch_size)?;
        if !(0.0..1.0).contains(&self.momentum) {
            bail!(Config, "momentum must lie in [0, 1)");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.decay_every == 0 {
            bail!(Config, "lr_decay must lie in (0, 1] and decay_every must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Config, "dropout must lie in [0, 1)");
        }
        if !(self.loss_beta > 0.0) {
            bail!(Config, "loss_beta must be positive");
        }
        Ok(())
    }
}

fn check_common(lr: f64, wd: f64, batch: usize) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        bail!(Config, "lr must be positive, got {}", lr);
    }
    if !(wd >= 0.0) {
        bail!(Config, "weight_decay must be non-negative");
    }
    if batch == 0 {
        bail!(Config, "batch_size must be positive");
    }
    Ok(())
}

/// Step-decayed learning rate `lr · decay^⌊epoch / every⌋`.
pub fn lr_at(epoch: usize, cfg: &FinetuneConfig) -> f64 {
    cfg.lr * crate::math::powf(cfg.lr_decay, (epoch / cfg.decay_every.max(1)) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub val: Option<f64>,
}

/// Mean per-sample losses per epoch.
pub type LossTrace = Vec<EpochLoss>;

#[derive(Clone, Copy)]
enum Objective {
    Bce,
    SmoothL1(f64),
}

/// Loss of one batch and its gradients by weight name.
fn batch_step(
    ckpt: &Checkpoint,
    data: &Dataset,
    batch: &[usize],
    objective: Objective,
    dropout_rate: f64,
    rng: &mut rng::ChaCha8Rng,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let bound = BoundModel::bind(&mut g, ckpt, true)?;
    let mut dropout = Dropout::new(dropout_rate, rng);
    let mut losses = Vec::with_capacity(batch.len());
    for &i in batch {
        let s = &data.samples()[i];
        let x = g.constant(s.image.clone());
        let y = model::forward_graph(&mut g, ckpt.spec(), &bound, x, &mut dropout)?;
        losses.push(match objective {
            Objective::Bce => g.bce_multilabel(y, &s.labels)?,
            Objective::SmoothL1(beta) => g.smooth_l1(y, &s.labels, beta)?,
        });
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l)?;
    }
    let loss = g.scale(total, 1.0 / losses.len() as f64)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    let named = bound.vars.iter().map(|(name, &v)| (name.clone(), grads.wrt(v))).collect();
    Ok((value, named))
}

/// Eval-mode mean loss over a dataset.
pub fn mean_loss(ckpt: &Checkpoint, data: &Dataset, loss_beta: f64) -> Result<f64> {
    let mut total = 0.0;
    for s in data.samples() {
        let y = model::predict(ckpt, &s.image)?;
        total += match ckpt.spec().head_kind {
            HeadKind::Pretrain15 => loss::bce_multilabel(&y, &s.labels)?,
            HeadKind::Severity2 => loss::smooth_l1(&s.labels, &y, loss_beta)?,
        };
    }
    Ok(total / data.len() as f64)
}

fn check_pairing(ckpt: &Checkpoint, data: &Dataset, head: HeadKind, kind: DatasetKind) -> Result<()> {
    if ckpt.spec().head_kind != head {
        bail!(Config, "checkpoint head is {:?}, expected {:?}", ckpt.spec().head_kind, head);
    }
    if data.kind() != kind {
        bail!(Data, "expected a {:?} dataset, got {:?}", kind, data.kind());
    }
    let b = &ckpt.spec().backbone;
    if data.image_shape() != [b.in_channels, b.height, b.width] {
        bail!(Data, "dataset images are {:?}, model expects {}x{}x{}", data.image_shape(), b.in_channels, b.height, b.width);
    }
    Ok(())
}

/// Runs one epoch of shuffled mini-batches, applying `step` after each, and
/// returns the sample-weighted mean training loss.
fn run_epoch(
    ckpt: &mut Checkpoint,
    data: &Dataset,
    order: &mut [usize],
    batch_size: usize,
    objective: Objective,
    dropout_rate: f64,
    shuffle_rng: &mut rng::ChaCha8Rng,
    dropout_rng: &mut rng::ChaCha8Rng,
    mut step: impl FnMut(&mut model::Weights, &BTreeMap<String, Tensor>) -> Result<()>,
) -> Result<f64> {
    order.shuffle(shuffle_rng);
    let mut total = 0.0;
    for batch in order.chunks(batch_size) {
        let (loss, grads) = batch_step(ckpt, data, batch, objective, dropout_rate, dropout_rng)?;
        total += loss * batch.len() as f64;
        ckpt.update_weights(|w| step(w, &grads))?;
    }
    Ok(total / data.len() as f64)
}

/// Multi-label pre-training with AdamW at a constant learning rate. Returns
/// the checkpoint tagged `pretrained` and the per-epoch training loss.
pub fn pretrain(ckpt: &Checkpoint, proxy: &Dataset, cfg: &PretrainConfig) -> Result<(Checkpoint, LossTrace)> {
    cfg.validate()?;
    check_pairing(ckpt, proxy, HeadKind::Pretrain15, DatasetKind::Proxy)?;
    let mut work = ckpt.clone();
    let mut state = AdamWState::default();
    let mut shuffle = rng::seeded(cfg.seed, stream::SHUFFLE);
    let mut drop = rng::seeded(cfg.seed, stream::DROPOUT);
    let mut order: Vec<usize> = (0..proxy.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let params = cfg.adamw();
    let rate = ckpt.spec().dropout;
    for epoch in 0..cfg.epochs {
        let train = run_epoch(&mut work, proxy, &mut order, cfg.batch_size, Objective::Bce, rate, &mut shuffle, &mut drop, |w, g| {
            optim::adamw_step(w, g, &mut state, params)
        })?;
        trace.push(EpochLoss { epoch, train, val: None });
    }
    if cfg.epochs > 0 {
        work.phase = Phase::Pretrained;
    }
    Ok((work, trace))
}

/// Severity fine-tuning with momentum SGD, the step-decay schedule and the
/// smooth-L1 loss. `validation` adds an eval-mode loss to every epoch.
pub fn finetune(
    ckpt: &Checkpoint,
    target: &Dataset,
    validation: Option<&Dataset>,
    cfg: &FinetuneConfig,
) -> Result<(Checkpoint, LossTrace)> {
    cfg.validate()?;
    check_pairing(ckpt, target, HeadKind::Severity2, DatasetKind::Target)?;
    if let Some(v) = validation {
        check_pairing(ckpt, v, HeadKind::Severity2, DatasetKind::Target)?;
    }
    let mut work = ckpt.clone();
    let mut state = SgdState::default();
    let mut shuffle = rng::seeded(cfg.seed, stream::SHUFFLE);
    let mut drop = rng::seeded(cfg.seed, stream::DROPOUT);
    let mut order: Vec<usize> = (0..target.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let params = SgdParams { lr: lr_at(epoch, cfg), momentum: cfg.momentum, weight_decay: cfg.weight_decay };
        let objective = Objective::SmoothL1(cfg.loss_beta);
        let train = run_epoch(&mut work, target, &mut order, cfg.batch_size, objective, cfg.dropout, &mut shuffle, &mut drop, |w, g| {
            optim::sgd_step(w, g, &mut state, params)
        })?;
        let val = validation.map(|v| mean_loss(&work, v, cfg.loss_beta)).transpose()?;
        trace.push(EpochLoss { epoch, train, val });
    }
    if cfg.epochs > 0 {
        work.phase = Phase::Finetuned;
    }
    Ok((work, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneSpec, StageSpec};
    use crate::data::{synth_proxy, synth_target, ImageGeometry};
    use crate::model::{AttentionKind, ModelSpec};

    fn spec(kind: AttentionKind, head: HeadKind) -> ModelSpec {
        ModelSpec {
            backbone: BackboneSpec {
                in_channels: 1,
                height: 8,
                width: 8,
                stages: alloc::vec![StageSpec { channels: 4, kernel: 3, stride: 2, padding: None }],
                projection: 8,
                activation: true,
            },
            attention_kind: kind,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            d: 8,
            m: 2,
            ffn_hidden: Some(16),
            beta: None,
            n_steps: 1,
            dropout: 0.0,
            head_kind: head,
        }
    }

    const GEO: ImageGeometry = ImageGeometry { channels: 1, height: 8, width: 8 };

    #[test]
    fn lr_schedule() {
        let cfg = FinetuneConfig::default();
        assert_eq!(lr_at(0, &cfg), 1e-3);
        assert!((lr_at(2, &cfg) - 0.98e-3).abs() < 1e-18);
        assert!((lr_at(5, &cfg) - 0.9604e-3).abs() < 1e-15);
        assert!((0..50).all(|e| lr_at(e + 1, &cfg) <= lr_at(e, &cfg)));
    }

    #[test]
    fn zero_epochs_leave_weights_unchanged() {
        let ck = model::init(&spec(AttentionKind::None, HeadKind::Severity2), 1).unwrap();
        let d = synth_target(1, 4, GEO, 0.0).unwrap();
        let (out, trace) = finetune(&ck, &d, None, &FinetuneConfig { epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(out, ck);
        assert!(trace.is_empty());
        let ck = model::init(&spec(AttentionKind::None, HeadKind::Pretrain15), 1).unwrap();
        let p = synth_proxy(1, 4, GEO).unwrap();
        let (out, _) = pretrain(&ck, &p, &PretrainConfig { epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(out, ck);
    }

    #[test]
    fn finetune_reduces_loss_for_every_kind() {
        let d = synth_target(2, 16, GEO, 0.0).unwrap();
        for kind in [AttentionKind::None, AttentionKind::Transformer, AttentionKind::Hopfield] {
            let ck = model::init(&spec(kind, HeadKind::Severity2), 3).unwrap();
            let cfg = FinetuneConfig { epochs: 25, lr: 5e-3, dropout: 0.0, batch_size: 8, ..Default::default() };
            let before = mean_loss(&ck, &d, 1.0).unwrap();
            let (out, trace) = finetune(&ck, &d, Some(&d), &cfg).unwrap();
            assert_eq!(trace.len(), 25);
            assert_eq!(out.phase, Phase::Finetuned);
            let after = mean_loss(&out, &d, 1.0).unwrap();
            assert!(after < before, "{kind:?}: {before} -> {after}");
        }
    }

    #[test]
    fn pretrain_is_deterministic_and_learns() {
        let p = synth_proxy(4, 16, GEO).unwrap();
        let ck = model::init(&spec(AttentionKind::None, HeadKind::Pretrain15), 5).unwrap();
        let cfg = PretrainConfig { lr: 1e-2, epochs: 10, ..Default::default() };
        let (a, ta) = pretrain(&ck, &p, &cfg).unwrap();
        let (b, tb) = pretrain(&ck, &p, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(a.phase, Phase::Pretrained);
        assert!(mean_loss(&a, &p, 1.0).unwrap() < mean_loss(&ck, &p, 1.0).unwrap());
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let ck = model::init(&spec(AttentionKind::None, HeadKind::Pretrain15), 1).unwrap();
        let d = synth_target(1, 4, GEO, 0.0).unwrap();
        assert!(finetune(&ck, &d, None, &FinetuneConfig::default()).is_err());
        let ck = model::init(&spec(AttentionKind::None, HeadKind::Severity2), 1).unwrap();
        let d = synth_target(1, 4, ImageGeometry { channels: 1, height: 9, width: 8 }, 0.0).unwrap();
        assert!(matches!(finetune(&ck, &d, None, &FinetuneConfig::default()), Err(crate::Error::Data(_))));
    }
}
