//! Subcommand implementations. Each returns an error whose
//! [`exit_code`](crate::Error::exit_code) the binary reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use hca_core::data::{DatasetKind, ImageGeometry, SynthParams};
use hca_core::evaluation::{self, CrossvalConfig, FoldOutcome, MetricReport};
use hca_core::gradcheck::{self, TOLERANCE};
use hca_core::model::{self, AttentionKind, Checkpoint, HeadKind, ModelSpec};
use hca_core::training::{self, PretrainConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{Arm, Resolved};
use crate::error::{Error, Result};
use crate::manifest::{self, write_dataset};
use crate::report;

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

#[derive(Debug, Clone)]
pub struct SynthArgs {
    pub kind: DatasetKind,
    pub seed: u64,
    pub n: usize,
    pub geometry: ImageGeometry,
    pub noise_sd: f64,
    pub out: PathBuf,
    pub force: bool,
}

/// Generates a synthetic dataset directory.
pub fn synth_data(args: &SynthArgs) -> Result<()> {
    if args.n == 0 {
        return Err(Error::Usage("--n must be at least 1".into()));
    }
    if args.out.exists() {
        let mut entries = fs::read_dir(&args.out).map_err(|e| Error::io(&args.out, e))?;
        if entries.next().is_some() {
            if !args.force {
                return Err(Error::Usage(format!("{} is not empty; pass --force to overwrite", args.out.display())));
            }
            for name in [manifest::MANIFEST, manifest::META] {
                let p = args.out.join(name);
                if p.exists() {
                    fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                }
            }
            let t = args.out.join(manifest::TENSOR_DIR);
            if t.exists() {
                fs::remove_dir_all(&t).map_err(|e| Error::io(&t, e))?;
            }
        }
    }
    mkdir(&args.out)?;
    let params = SynthParams {
        kind: args.kind,
        seed: args.seed,
        n_samples: args.n,
        geometry: args.geometry,
        noise_sd: if args.kind == DatasetKind::Target { args.noise_sd } else { 0.0 },
        score_ranges: None,
    };
    let ds = params.generate()?;
    write_dataset(&args.out, &ds, Some(&params))
}

fn pretrain_spec(spec: &ModelSpec) -> ModelSpec {
    ModelSpec { head_kind: HeadKind::Pretrain15, ..spec.clone() }
}

fn pretrain_cfg(r: &Resolved, seed: u64) -> PretrainConfig {
    PretrainConfig { seed, ..r.config.pretrain.clone() }
}

/// Runs pre-training for `spec` from a seeded initialization.
pub fn pretrain_one(
    spec: &ModelSpec,
    proxy: &hca_core::data::Dataset,
    cfg: &PretrainConfig,
) -> Result<(Checkpoint, training::LossTrace)> {
    let init = model::init(&pretrain_spec(spec), cfg.seed)?;
    Ok(training::pretrain(&init, proxy, cfg)?)
}

fn seeds(r: &Resolved, seed: Option<u64>) -> Vec<u64> {
    seed.map(|s| vec![s]).unwrap_or_else(|| r.config.eval.seeds.clone())
}

/// Pre-trains every arm that needs a pre-trained body and has no checkpoint
/// of its own. Writes `pretrain/<arm>/checkpoint/` and `pretrain/<arm>/loss.csv`.
pub fn pretrain(r: &Resolved, seed: Option<u64>) -> Result<Vec<PathBuf>> {
    let proxy = r.dataset(DatasetKind::Proxy)?;
    let seed = seeds(r, seed)[0];
    let mut written = Vec::new();
    let arms: Vec<&Arm> = r.arms.iter().filter(|a| a.pretrained && a.checkpoint.is_none()).collect();
    let arms = if arms.is_empty() { r.arms.iter().take(1).collect() } else { arms };
    for arm in arms {
        let (ckpt, trace) = pretrain_one(&arm.spec, &proxy, &pretrain_cfg(r, seed))?;
        let dir = r.out_dir.join("pretrain").join(&arm.name);
        mkdir(&dir)?;
        save_checkpoint(&ckpt, &dir.join("checkpoint"))?;
        report::write_loss_csv(&dir.join("loss.csv"), &trace)?;
        written.push(dir);
    }
    Ok(written)
}

#[derive(Debug, Serialize)]
struct ArmRecord<'a> {
    name: &'a str,
    pretrained: bool,
    model: &'a ModelSpec,
    seeds: &'a [u64],
    k: usize,
}

/// Summary of one cross-validated arm.
#[derive(Debug, Clone)]
pub struct ArmResult {
    pub name: String,
    pub reports: Vec<MetricReport>,
    pub aggregate: evaluation::AggregateReport,
}

/// Pre-trained checkpoints keyed by everything that determines them: the
/// pre-training spec, the proxy source, the pre-training config and the seed.
pub type PretrainCache = BTreeMap<String, (Checkpoint, training::LossTrace)>;

/// Cross-validates every arm for every seed, running up to `jobs` folds at
/// once. Output per arm under `<out_dir>/<arm>/`.
pub fn crossval(r: &Resolved, seed: Option<u64>, jobs: usize) -> Result<Vec<ArmResult>> {
    crossval_cached(r, seed, jobs, &mut PretrainCache::new())
}

/// [`crossval`] reusing and extending `cache` across calls.
pub fn crossval_cached(r: &Resolved, seed: Option<u64>, jobs: usize, cache: &mut PretrainCache) -> Result<Vec<ArmResult>> {
    let target = r.dataset(DatasetKind::Target)?;
    let seeds = seeds(r, seed);
    let needs_proxy = r.arms.iter().any(|a| a.pretrained && a.checkpoint.is_none());
    let proxy = if needs_proxy { Some(r.dataset(DatasetKind::Proxy)?) } else { None };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Usage(format!("cannot start {jobs} workers: {e}")))?;
    let patients: Vec<&str> = target.samples().iter().map(|s| s.patient_id.as_str()).collect();
    let mut results = Vec::new();
    for arm in &r.arms {
        let dir = r.out_dir.join(&arm.name);
        mkdir(&dir)?;
        let mut reports = Vec::new();
        for &s in &seeds {
            let start = match (&arm.checkpoint, arm.pretrained) {
                (_, false) => None,
                (Some(path), true) => Some(load_checkpoint(path)?),
                (None, true) => {
                    let key = serde_json::to_string(&(
                        pretrain_spec(&arm.spec),
                        r.proxy_source(),
                        pretrain_cfg(r, s),
                    ))
                    .expect("pre-training inputs serialize");
                    if !cache.contains_key(&key) {
                        let proxy = proxy.as_ref().expect("proxy loaded for pre-trained arms");
                        cache.insert(key.clone(), pretrain_one(&arm.spec, proxy, &pretrain_cfg(r, s))?);
                    }
                    let (ck, trace) = &cache[&key];
                    report::write_loss_csv(&dir.join(format!("pretrain_loss_seed{s}.csv")), trace)?;
                    Some(ck.clone())
                }
            };
            let cfg = CrossvalConfig { k: r.config.eval.k, seed: s, finetune: r.config.finetune.clone() };
            let split = evaluation::kfold_split(&patients, cfg.k, s)?;
            let outcomes: Vec<FoldOutcome> = pool.install(|| {
                (0..cfg.k)
                    .into_par_iter()
                    .map(|f| evaluation::run_fold(&arm.spec, &target, &split, f, start.as_ref(), &cfg))
                    .collect::<hca_core::Result<Vec<_>>>()
            })?;
            let rows: Vec<_> = outcomes.iter().flat_map(|o| o.predictions.iter().cloned()).collect();
            report::write_predictions_csv(&dir.join(format!("predictions_seed{s}.csv")), &rows)?;
            for o in &outcomes {
                report::write_loss_csv(&dir.join(format!("loss_seed{s}_fold{}.csv", o.report.fold)), &o.trace)?;
                reports.push(o.report);
            }
        }
        let aggregate = evaluation::aggregate(&reports)?;
        report::write_folds_csv(&dir.join("folds.csv"), &reports)?;
        report::write_json(&dir.join(report::AGGREGATE_FILE), &aggregate)?;
        let record = ArmRecord { name: &arm.name, pretrained: arm.pretrained, model: &arm.spec, seeds: &seeds, k: r.config.eval.k };
        report::write_json(&dir.join("arm.json"), &record)?;
        results.push(ArmResult { name: arm.name.clone(), reports, aggregate });
    }
    Ok(results)
}

/// Result of the gradient-check command.
#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub tolerance: f64,
    pub checks: BTreeMap<String, f64>,
    pub passed: bool,
}

/// Coordinates perturbed per weight tensor in the full-model checks.
pub const MODEL_COORDS: usize = 6;

/// Checks every primitive, then each configured arm's model (or the base
/// model under every attention kind when no arms are listed). Writes
/// `<out_dir>/grad_check.json`.
pub fn grad_check(r: &Resolved, seed: Option<u64>) -> Result<GradReport> {
    let seed = seeds(r, seed)[0];
    let mut checks = BTreeMap::new();
    for c in gradcheck::primitive_suite(seed)? {
        checks.insert(c.name, c.max_rel_error);
    }
    let models: Vec<(String, ModelSpec)> = if r.config.arms.is_some() {
        r.arms.iter().map(|a| (format!("arm.{}", a.name), a.spec.clone())).collect()
    } else {
        [AttentionKind::None, AttentionKind::Transformer, AttentionKind::Hopfield]
            .into_iter()
            .map(|kind| ModelSpec { attention_kind: kind, ..r.config.model.clone() })
            .filter(|s| s.validate().is_ok())
            .map(|s| (String::new(), s))
            .collect()
    };
    for (name, spec) in models {
        let c = gradcheck::model_check(&spec, seed, Some(MODEL_COORDS))?;
        checks.insert(if name.is_empty() { c.name } else { name }, c.max_rel_error);
    }
    let passed = checks.values().all(|&e| e <= TOLERANCE);
    let rep = GradReport { tolerance: TOLERANCE, checks, passed };
    mkdir(&r.out_dir)?;
    report::write_json(&r.out_dir.join("grad_check.json"), &rep)?;
    Ok(rep)
}

/// Merges aggregate reports into a markdown table at `out`.
pub fn report(inputs: &[PathBuf], out: &Path) -> Result<String> {
    if inputs.is_empty() {
        return Err(Error::Usage("report needs at least one --in".into()));
    }
    let blocks = inputs.iter().map(|p| report::collect_block(p)).collect::<Result<Vec<_>>>()?;
    let md = report::render_markdown(&blocks)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    fs::write(out, &md).map_err(|e| Error::io(out, e))?;
    Ok(md)
}
