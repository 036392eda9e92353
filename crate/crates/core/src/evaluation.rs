//! Regression and ranking metrics, patient-grouped k-fold splitting, and
//! cross-validated fine-tuning with fold aggregation.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ATTRIBUTES};
use crate::error::{bail, Result};
use crate::model::{self, Checkpoint, HeadKind, ModelSpec};
use crate::rng::{self, stream};
use crate::training::{self, FinetuneConfig, LossTrace};

fn check_pair(y: &[f64], yhat: &[f64], min_len: usize) -> Result<()> {
    if y.len() != yhat.len() {
        bail!(Dimension, "length mismatch: {} vs {}", y.len(), yhat.len());
    }
    if y.len() < min_len {
        bail!(Parameter, "need at least {} values, got {}", min_len, y.len());
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat, 1)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

pub fn mse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat, 1)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

/// Coefficient of determination `1 − SS_res / SS_tot`.
pub fn r_squared(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat, 2)?;
    let m = mean(y);
    let ss_tot: f64 = y.iter().map(|v| (v - m) * (v - m)).sum();
    if ss_tot == 0.0 {
        bail!(DegenerateData, "R² is undefined for constant targets");
    }
    let ss_res: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn pearson(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat, 2)?;
    let (my, mh) = (mean(y), mean(yhat));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in y.iter().zip(yhat) {
        let (da, db) = (a - my, b - mh);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        bail!(DegenerateData, "Pearson correlation is undefined for constant input");
    }
    Ok((sxy / crate::math::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// Area under the ROC curve as the Mann–Whitney statistic, with tied scores
/// counted as one half via mid-ranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        bail!(Dimension, "length mismatch: {} vs {}", scores.len(), labels.len());
    }
    if scores.iter().any(|s| s.is_nan()) {
        bail!(Parameter, "scores must not be NaN");
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        bail!(DegenerateData, "AUC needs both positive and negative labels");
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of doubled mid-ranks keeps everything in integers.
    let mut pos_rank2: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        pos_rank2 += mid2 * idx[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        i = j + 1;
    }
    let (p, n) = (n_pos as u64, n_neg as u64);
    let u2 = pos_rank2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Fold index for every sample, grouped by patient.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    /// `folds[i]` is the fold of sample `i`.
    pub folds: Vec<usize>,
}

impl FoldAssignment {
    /// Sample indices of fold `f`.
    pub fn members(&self, f: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == f).collect()
    }

    pub fn complement(&self, f: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] != f).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = alloc::vec![0; self.k];
        for &f in &self.folds {
            s[f] += 1;
        }
        s
    }
}

/// Patient-grouped k-fold split: patients are shuffled by `seed`, stably
/// ordered by descending sample count, and dealt round-robin to folds.
pub fn kfold_split<S: AsRef<str>>(patients: &[S], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        bail!(Parameter, "k must be at least 2, got {}", k);
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in patients.iter().enumerate() {
        groups.entry(p.as_ref()).or_default().push(i);
    }
    if groups.len() < k {
        bail!(Data, "{} distinct patients cannot fill {} folds", groups.len(), k);
    }
    let mut order: Vec<Vec<usize>> = groups.into_values().collect();
    order.shuffle(&mut rng::seeded(seed, stream::FOLDS));
    order.sort_by_key(|g| core::cmp::Reverse(g.len()));
    let mut folds = alloc::vec![0; patients.len()];
    for (g, members) in order.iter().enumerate() {
        for &i in members {
            folds[i] = g % k;
        }
    }
    Ok(FoldAssignment { k, folds })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeMetrics {
    pub r2: f64,
    pub pearson: f64,
}

/// Held-out metrics of one fold. MAE and MSE pool both attributes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fold: usize,
    pub seed: u64,
    pub mae: f64,
    pub mse: f64,
    pub geographic_extend: AttributeMetrics,
    pub opacity: AttributeMetrics,
}

impl MetricReport {
    /// Flat `(name, value)` pairs in report order.
    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("mae", self.mae),
            ("mse", self.mse),
            ("r2_geographic_extend", self.geographic_extend.r2),
            ("pearson_geographic_extend", self.geographic_extend.pearson),
            ("r2_opacity", self.opacity.r2),
            ("pearson_opacity", self.opacity.pearson),
        ]
    }
}

pub const METRIC_NAMES: [&str; 6] =
    ["mae", "mse", "r2_geographic_extend", "pearson_geographic_extend", "r2_opacity", "pearson_opacity"];

/// Whether a larger value of the metric is better.
pub fn higher_is_better(metric: &str) -> bool {
    !matches!(metric, "mae" | "mse")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator); 0 for a single value.
    pub std: f64,
    pub per_fold: Vec<f64>,
}

impl MetricSummary {
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            bail!(Parameter, "cannot summarize zero values");
        }
        let m = mean(&values);
        let std = if values.len() > 1 {
            crate::math::sqrt(values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64)
        } else {
            0.0
        };
        Ok(Self { mean: m, std, per_fold: values })
    }
}

pub type AggregateReport = BTreeMap<String, MetricSummary>;

pub fn aggregate(reports: &[MetricReport]) -> Result<AggregateReport> {
    let mut out = AggregateReport::new();
    for (i, name) in METRIC_NAMES.iter().enumerate() {
        let values = reports.iter().map(|r| r.named()[i].1).collect();
        out.insert((*name).into(), MetricSummary::from_values(values)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub fold: usize,
    pub sample_id: String,
    pub attribute: String,
    pub actual: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldOutcome {
    pub report: MetricReport,
    pub predictions: Vec<PredictionRow>,
    pub trace: LossTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossvalConfig {
    pub k: usize,
    pub seed: u64,
    #[serde(default)]
    pub finetune: FinetuneConfig,
}

/// Seed of fold `fold` within a run seeded by `seed`.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    // splitmix64 finalizer over the pair.
    let mut z = seed ^ (fold as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Starting checkpoint of a fold: the pretrained body moved onto `spec` with
/// a fresh severity head, or a random initialization.
pub fn fold_start(spec: &ModelSpec, pretrained: Option<&Checkpoint>, seed: u64) -> Result<Checkpoint> {
    let mut spec = spec.clone();
    spec.head_kind = HeadKind::Severity2;
    match pretrained {
        Some(p) => model::transfer(p, &spec, seed),
        None => model::init(&spec, seed),
    }
}

/// Fine-tunes on every fold but `fold` and evaluates on `fold`.
pub fn run_fold(
    spec: &ModelSpec,
    data: &Dataset,
    split: &FoldAssignment,
    fold: usize,
    pretrained: Option<&Checkpoint>,
    cfg: &CrossvalConfig,
) -> Result<FoldOutcome> {
    if fold >= split.k || split.folds.len() != data.len() {
        bail!(Parameter, "fold {} is not part of the {}-fold split of this dataset", fold, split.k);
    }
    let seed = fold_seed(cfg.seed, fold);
    let train = data.subset(&split.complement(fold))?;
    let held = data.subset(&split.members(fold))?;
    let start = fold_start(spec, pretrained, seed)?;
    let ft = FinetuneConfig { seed, ..cfg.finetune.clone() };
    let (tuned, trace) = training::finetune(&start, &train, Some(&held), &ft)?;

    let mut actual = [Vec::new(), Vec::new()];
    let mut predicted = [Vec::new(), Vec::new()];
    let mut predictions = Vec::with_capacity(2 * held.len());
    for s in held.samples() {
        let y = model::predict(&tuned, &s.image)?;
        for a in 0..2 {
            actual[a].push(s.labels.data()[a]);
            predicted[a].push(y.data()[a]);
            predictions.push(PredictionRow {
                fold,
                sample_id: s.sample_id.clone(),
                attribute: ATTRIBUTES[a].into(),
                actual: s.labels.data()[a],
                predicted: y.data()[a],
            });
        }
    }
    let pooled_y: Vec<f64> = actual.concat();
    let pooled_p: Vec<f64> = predicted.concat();
    let attr = |a: usize| -> Result<AttributeMetrics> {
        Ok(AttributeMetrics { r2: r_squared(&actual[a], &predicted[a])?, pearson: pearson(&actual[a], &predicted[a])? })
    };
    let report = MetricReport {
        fold,
        seed: cfg.seed,
        mae: mae(&pooled_y, &pooled_p)?,
        mse: mse(&pooled_y, &pooled_p)?,
        geographic_extend: attr(0)?,
        opacity: attr(1)?,
    };
    Ok(FoldOutcome { report, predictions, trace })
}

/// Sequential k-fold cross-validation.
pub fn crossval(
    spec: &ModelSpec,
    data: &Dataset,
    pretrained: Option<&Checkpoint>,
    cfg: &CrossvalConfig,
) -> Result<(Vec<FoldOutcome>, AggregateReport)> {
    let patients: Vec<&str> = data.samples().iter().map(|s| s.patient_id.as_str()).collect();
    let split = kfold_split(&patients, cfg.k, cfg.seed)?;
    let outcomes = (0..cfg.k).map(|f| run_fold(spec, data, &split, f, pretrained, cfg)).collect::<Result<Vec<_>>>()?;
    let reports: Vec<MetricReport> = outcomes.iter().map(|o| o.report).collect();
    Ok((outcomes, aggregate(&reports)?))
}
