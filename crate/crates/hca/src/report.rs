//! Report files: loss traces, predictions, per-fold metrics, aggregates and
//! the merged markdown table.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use hca_core::evaluation::{higher_is_better, AggregateReport, MetricReport, PredictionRow};
use hca_core::training::LossTrace;

use crate::error::{Error, Result};

pub const AGGREGATE_FILE: &str = "aggregate.json";

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Format { path: path.into(), offset: 0, message: e.to_string() })
}

fn finish(path: &Path, w: csv::Writer<fs::File>) -> Result<()> {
    w.into_inner()
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?
        .sync_all()
        .map_err(|e| Error::io(path, e))
}

fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv_writer(path)?;
    let wrap = |e: csv::Error| Error::Format { path: path.into(), offset: 0, message: e.to_string() };
    w.write_record(header).map_err(wrap)?;
    for r in rows {
        w.write_record(r.into_iter().collect::<Vec<_>>()).map_err(wrap)?;
    }
    finish(path, w)
}

/// `epoch,train_loss,val_loss`; the validation column is empty when absent.
pub fn write_loss_csv(path: &Path, trace: &LossTrace) -> Result<()> {
    write_rows(
        path,
        &["epoch", "train_loss", "val_loss"],
        trace.iter().map(|e| [e.epoch.to_string(), e.train.to_string(), e.val.map(|v| v.to_string()).unwrap_or_default()]),
    )
}

/// `fold,sample_id,attribute,actual,predicted`
pub fn write_predictions_csv(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    write_rows(
        path,
        &["fold", "sample_id", "attribute", "actual", "predicted"],
        rows.iter().map(|r| {
            [r.fold.to_string(), r.sample_id.clone(), r.attribute.clone(), r.actual.to_string(), r.predicted.to_string()]
        }),
    )
}

/// One row per (seed, fold) with every metric.
pub fn write_folds_csv(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let Some(first) = reports.first() else { return write_rows(path, &["seed", "fold"], Vec::<Vec<String>>::new()) };
    let mut header = vec!["seed", "fold"];
    header.extend(first.named().iter().map(|(n, _)| *n));
    write_rows(
        path,
        &header,
        reports.iter().map(|r| {
            let mut row = vec![r.seed.to_string(), r.fold.to_string()];
            row.extend(r.named().iter().map(|(_, v)| v.to_string()));
            row
        }),
    )
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_aggregate(path: &Path) -> Result<AggregateReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        Error::Merge(format!("{}#{}: {}", path.display(), crate::config::pointer(e.path()), e.inner()))
    })
}

/// Rows of one table block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub rows: Vec<(String, AggregateReport)>,
}

fn dir_label(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string())
}

/// Collects one block per input: an aggregate file, a directory holding one,
/// or a directory whose subdirectories hold one each.
pub fn collect_block(input: &Path) -> Result<Block> {
    if input.is_file() {
        let row = input.parent().map(dir_label).unwrap_or_default();
        return Ok(Block { name: input.display().to_string(), rows: vec![(row, read_aggregate(input)?)] });
    }
    let own = input.join(AGGREGATE_FILE);
    if own.is_file() {
        return Ok(Block { name: input.display().to_string(), rows: vec![(dir_label(input), read_aggregate(&own)?)] });
    }
    let entries = fs::read_dir(input).map_err(|e| Error::io(input, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(AGGREGATE_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Merge(format!("no {AGGREGATE_FILE} under {}", input.display())));
    }
    let rows = dirs.iter().map(|d| Ok((dir_label(d), read_aggregate(&d.join(AGGREGATE_FILE))?))).collect::<Result<_>>()?;
    Ok(Block { name: input.display().to_string(), rows })
}

/// Indices of the best rows of `metric` within a block; ties are all best.
pub fn best_rows(block: &Block, metric: &str) -> Vec<usize> {
    let values: Vec<f64> = block.rows.iter().map(|(_, r)| r[metric].mean).collect();
    let best = if higher_is_better(metric) {
        values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    } else {
        values.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    (0..values.len()).filter(|&i| values[i] == best).collect()
}

/// Markdown table with `mean ± std` cells and the best value per metric and
/// block in bold.
pub fn render_markdown(blocks: &[Block]) -> Result<String> {
    let Some(first) = blocks.first().and_then(|b| b.rows.first()) else {
        return Err(Error::Usage("no report inputs".into()));
    };
    let metrics: Vec<String> = first.1.keys().cloned().collect();
    let expected: BTreeSet<&String> = metrics.iter().collect();
    for b in blocks {
        for (name, r) in &b.rows {
            if r.keys().collect::<BTreeSet<_>>() != expected {
                return Err(Error::Merge(format!("{} / {} has a different metric set", b.name, name)));
            }
        }
    }
    let mut out = String::new();
    for (i, b) in blocks.iter().enumerate() {
        if blocks.len() > 1 {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "### {}\n", b.name);
        }
        let _ = writeln!(out, "| model | {} |", metrics.join(" | "));
        let _ = writeln!(out, "|---|{}", "---|".repeat(metrics.len()));
        let best: Vec<Vec<usize>> = metrics.iter().map(|m| best_rows(b, m)).collect();
        for (r, (name, rep)) in b.rows.iter().enumerate() {
            let cells: Vec<String> = metrics
                .iter()
                .enumerate()
                .map(|(m, key)| {
                    let s = &rep[key];
                    let cell = format!("{:.3} ± {:.3}", s.mean, s.std);
                    if best[m].contains(&r) {
                        format!("**{cell}**")
                    } else {
                        cell
                    }
                })
                .collect();
            let _ = writeln!(out, "| {} | {} |", name, cells.join(" | "));
        }
    }
    Ok(out)
}
