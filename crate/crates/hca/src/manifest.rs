//! Dataset directories: a CSV manifest, one tensor file per image, and the
//! generator parameters when the set is synthetic.
//!
//! The first manifest line declares the dataset kind, either `kind,proxy` or
//! `kind,target,lo0,hi0,lo1,hi1` with the two score ranges. The second is the
//! header `sample_id,patient_id,tensor_path,label_0,...`. Data rows are
//! numbered from 1 in error messages.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use hca_core::data::{self, Dataset, DatasetKind, Sample, SynthParams};
use hca_core::Tensor;

use crate::error::{Error, Result};
use crate::tensor_file::{load_tensor, save_tensor};

pub const MANIFEST: &str = "manifest.csv";
pub const META: &str = "dataset_meta.json";
pub const TENSOR_DIR: &str = "tensors";

fn header(kind: DatasetKind) -> Vec<String> {
    let mut h: Vec<String> = ["sample_id", "patient_id", "tensor_path"].iter().map(|s| s.to_string()).collect();
    h.extend((0..kind.label_arity()).map(|i| format!("label_{i}")));
    h
}

/// Writes `ds` into `dir` as `manifest.csv` plus `tensors/<sample_id>.hcat`,
/// and `dataset_meta.json` when `meta` is given.
pub fn write_dataset(dir: &Path, ds: &Dataset, meta: Option<&SynthParams>) -> Result<()> {
    let tdir = dir.join(TENSOR_DIR);
    fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    let path = dir.join(MANIFEST);
    let mut w = csv::WriterBuilder::new().flexible(true).from_path(&path).map_err(|e| csv_err(&path, e))?;
    let mut kind_row = vec!["kind".to_string()];
    match ds.kind() {
        DatasetKind::Proxy => kind_row.push("proxy".into()),
        DatasetKind::Target => {
            kind_row.push("target".into());
            for (lo, hi) in ds.score_ranges().expect("target sets carry ranges") {
                kind_row.push(lo.to_string());
                kind_row.push(hi.to_string());
            }
        }
    }
    w.write_record(&kind_row).map_err(|e| csv_err(&path, e))?;
    w.write_record(header(ds.kind())).map_err(|e| csv_err(&path, e))?;
    for s in ds.samples() {
        let rel = format!("{TENSOR_DIR}/{}.hcat", s.sample_id);
        save_tensor(&s.image, dir.join(&rel))?;
        let mut row = vec![s.sample_id.clone(), s.patient_id.clone(), rel];
        row.extend(s.labels.data().iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    if let Some(meta) = meta {
        let mpath = dir.join(META);
        let text = serde_json::to_string_pretty(meta).expect("metadata serializes");
        fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
    }
    Ok(())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map(|p| p.byte()).unwrap_or(0);
    Error::Format { path: path.to_path_buf(), offset, message: e.to_string() }
}

fn parse_kind(path: &Path, rec: &csv::StringRecord) -> Result<(DatasetKind, Option<[(f64, f64); 2]>)> {
    let bad = |m: String| Error::Format { path: path.to_path_buf(), offset: 0, message: m };
    if rec.get(0) != Some("kind") {
        return Err(bad("first line must be `kind,proxy` or `kind,target,lo0,hi0,lo1,hi1`".into()));
    }
    match (rec.get(1), rec.len()) {
        (Some("proxy"), 2) => Ok((DatasetKind::Proxy, None)),
        (Some("target"), 2) => Ok((DatasetKind::Target, Some(data::DEFAULT_RANGES))),
        (Some("target"), 6) => {
            let v = (2..6)
                .map(|i| rec[i].trim().parse::<f64>().map_err(|_| bad(format!("score range bound {:?} is not a number", &rec[i]))))
                .collect::<Result<Vec<f64>>>()?;
            Ok((DatasetKind::Target, Some([(v[0], v[1]), (v[2], v[3])])))
        }
        _ => Err(bad(format!("unrecognized kind row {:?}", rec.iter().collect::<Vec<_>>()))),
    }
}

/// Reads and validates a manifest. Relative tensor paths resolve against the
/// manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Format { path: path.to_path_buf(), offset: 0, message: format!("{other:?}") },
        })?;
    let mut records = r.records();
    let mut next = || records.next().transpose().map_err(|e| csv_err(path, e));
    let Some(kind_rec) = next()? else {
        return Err(Error::Format { path: path.to_path_buf(), offset: 0, message: "empty manifest".into() });
    };
    let (kind, ranges) = parse_kind(path, &kind_rec)?;
    let expected = header(kind);
    match next()? {
        Some(h) if h.iter().map(str::trim).eq(expected.iter().map(String::as_str)) => {}
        Some(h) => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: h.position().map(|p| p.byte()).unwrap_or(0),
                message: format!("expected header `{}`", expected.join(",")),
            })
        }
        None => return Err(Error::Format { path: path.to_path_buf(), offset: 0, message: "missing header row".into() }),
    }
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut row = 0;
    while let Some(rec) = next()? {
        row += 1;
        let fail = |message: String| Error::Manifest { path: path.to_path_buf(), row, message };
        if rec.len() != expected.len() {
            return Err(fail(format!("expected {} fields, found {}", expected.len(), rec.len())));
        }
        let sample_id = rec[0].trim().to_string();
        if sample_id.is_empty() {
            return Err(fail("empty sample_id".into()));
        }
        if !seen.insert(sample_id.clone()) {
            return Err(fail(format!("duplicate sample_id {sample_id:?}")));
        }
        let tensor_path = PathBuf::from(rec[2].trim());
        let resolved = if tensor_path.is_absolute() { tensor_path } else { base.join(tensor_path) };
        if !resolved.is_file() {
            return Err(fail(format!("missing tensor file {}", resolved.display())));
        }
        let image = load_tensor(&resolved).map_err(|e| fail(e.to_string()))?;
        if image.ndim() != 3 {
            return Err(fail(format!("image must be c×h×w, got {:?}", image.shape())));
        }
        match &shape {
            Some(s) if s.as_slice() != image.shape() => {
                return Err(fail(format!("image shape {:?} differs from {:?}", image.shape(), s)))
            }
            None => shape = Some(image.shape().to_vec()),
            _ => {}
        }
        let labels = (3..rec.len())
            .map(|i| rec[i].trim().parse::<f64>().map_err(|_| fail(format!("label {:?} is not a number", &rec[i]))))
            .collect::<Result<Vec<f64>>>()?;
        let labels = Tensor::vector(labels);
        data::validate_labels(kind, ranges.as_ref(), &labels).map_err(|e| fail(e.to_string()))?;
        samples.push(Sample { sample_id, patient_id: rec[1].trim().to_string(), image, labels });
    }
    if samples.is_empty() {
        return Err(Error::Core(hca_core::Error::Data(format!("{}: no samples", path.display()))));
    }
    Ok(Dataset::new(kind, samples, ranges)?)
}
