//! Run configuration: a strict JSON document validated before any work.
//!
//! Unknown keys are rejected everywhere. Errors carry a JSON pointer to the
//! offending value. Relative input paths resolve against the directory of the
//! config file; `out_dir` resolves against the working directory and falls
//! back to the `HCA_OUT` environment variable.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use hca_core::data::{self, Dataset, DatasetKind, ImageGeometry, SynthParams};
use hca_core::model::ModelSpec;
use hca_core::training::{FinetuneConfig, PretrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest;

pub const OUT_ENV: &str = "HCA_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    /// Experimental arms; each overrides fields of `model`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arms: Option<Vec<ArmConfig>>,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub name: String,
    /// Partial model spec merged over the top-level `model`.
    #[serde(default)]
    pub model: serde_json::Map<String, serde_json::Value>,
    /// Start fine-tuning from a pre-trained body.
    #[serde(default = "yes")]
    pub pretrained: bool,
    /// Existing pre-trained checkpoint directory; pre-training runs in
    /// process when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proxy: Option<DataSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<DataSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Manifest(PathBuf),
    Synth(SynthSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSource {
    pub seed: u64,
    pub n_samples: usize,
    #[serde(default)]
    pub geometry: ImageGeometry,
    #[serde(default)]
    pub noise_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: 5, seeds: vec![0] }
    }
}

/// One arm after merging overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub name: String,
    pub spec: ModelSpec,
    pub pretrained: bool,
    pub checkpoint: Option<PathBuf>,
}

/// A validated configuration with resolved paths and arms.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub config: RunConfig,
    pub arms: Vec<Arm>,
    pub out_dir: PathBuf,
    base_dir: PathBuf,
}

/// JSON pointer for a deserializer path.
pub fn pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } | Segment::Enum { variant: key } => {
                out.push_str(&key.replace('~', "~0").replace('/', "~1"))
            }
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

fn from_value<T: serde::de::DeserializeOwned>(value: serde_json::Value, prefix: &str) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let p = pointer(e.path());
        Error::config(if p == "/" { prefix.to_string() } else { format!("{prefix}{p}") }, e.inner().to_string())
    })
}

fn merge(base: &mut serde_json::Value, over: &serde_json::Map<String, serde_json::Value>) {
    let serde_json::Value::Object(obj) = base else { return };
    for (k, v) in over {
        match (obj.get_mut(k), v) {
            (Some(dst @ serde_json::Value::Object(_)), serde_json::Value::Object(src)) => merge(dst, src),
            _ => {
                obj.insert(k.clone(), v.clone());
            }
        }
    }
}

impl Resolved {
    pub fn from_str(text: &str, base_dir: &Path, out_override: Option<PathBuf>) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let p = pointer(e.path());
            Error::config(p, e.inner().to_string())
        })?;
        Self::from_config(config, base_dir, out_override)
    }

    pub fn load(path: &Path, out_override: Option<PathBuf>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_str(&text, &base, out_override)
    }

    pub fn from_config(config: RunConfig, base_dir: &Path, out_override: Option<PathBuf>) -> Result<Self> {
        let check = |pointer: &str, r: hca_core::Result<()>| r.map_err(|e| Error::config(pointer, e.to_string()));
        check("/model", config.model.validate())?;
        check("/pretrain", config.pretrain.validate())?;
        check("/finetune", config.finetune.validate())?;
        if config.eval.k < 2 {
            return Err(Error::config("/eval/k", "k must be at least 2"));
        }
        if config.eval.seeds.is_empty() {
            return Err(Error::config("/eval/seeds", "at least one seed is required"));
        }
        for (name, src) in [("proxy", &config.data.proxy), ("target", &config.data.target)] {
            if let Some(DataSource::Synth(s)) = src {
                if s.n_samples == 0 {
                    return Err(Error::config(format!("/data/{name}/synth/n_samples"), "n_samples must be at least 1"));
                }
            }
        }
        let base_model = serde_json::to_value(&config.model).expect("model spec serializes");
        let arms = match &config.arms {
            None => vec![Arm {
                name: "model".into(),
                spec: config.model.clone(),
                pretrained: config.data.proxy.is_some(),
                checkpoint: None,
            }],
            Some(list) => {
                if list.is_empty() {
                    return Err(Error::config("/arms", "arm list is empty"));
                }
                let mut names = BTreeSet::new();
                let mut arms = Vec::with_capacity(list.len());
                for (i, a) in list.iter().enumerate() {
                    let valid = !a.name.is_empty()
                        && a.name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
                        && !a.name.starts_with('.');
                    if !valid {
                        return Err(Error::config(format!("/arms/{i}/name"), "names use letters, digits, '-', '_' and '.'"));
                    }
                    if !names.insert(a.name.clone()) {
                        return Err(Error::config(format!("/arms/{i}/name"), format!("duplicate arm {:?}", a.name)));
                    }
                    let mut merged = base_model.clone();
                    merge(&mut merged, &a.model);
                    let spec: ModelSpec = from_value(merged, &format!("/arms/{i}/model"))?;
                    check(&format!("/arms/{i}/model"), spec.validate())?;
                    let checkpoint = a.checkpoint.as_ref().map(|p| base_dir.join(p));
                    arms.push(Arm { name: a.name.clone(), spec, pretrained: a.pretrained, checkpoint });
                }
                arms
            }
        };
        let out_dir = match (out_override, &config.out_dir, std::env::var_os(OUT_ENV)) {
            (Some(p), _, _) => p,
            (None, Some(p), _) => p.clone(),
            (None, None, Some(env)) => PathBuf::from(env),
            (None, None, None) => return Err(Error::config("/out_dir", format!("no out_dir given and {OUT_ENV} is unset"))),
        };
        Ok(Self { config, arms, out_dir, base_dir: base_dir.to_path_buf() })
    }

    /// The proxy source with a manifest path resolved against the config
    /// directory, identifying the proxy data independently of where it is read from.
    pub fn proxy_source(&self) -> Option<DataSource> {
        self.config.data.proxy.clone().map(|src| match src {
            DataSource::Manifest(p) => DataSource::Manifest(self.base_dir.join(p)),
            synth => synth,
        })
    }

    /// Loads or generates the dataset of the given kind.
    pub fn dataset(&self, kind: DatasetKind) -> Result<Dataset> {
        let (name, src) = match kind {
            DatasetKind::Proxy => ("proxy", &self.config.data.proxy),
            DatasetKind::Target => ("target", &self.config.data.target),
        };
        let ds = match src {
            None => return Err(Error::config(format!("/data/{name}"), format!("no {name} dataset configured"))),
            Some(DataSource::Manifest(p)) => manifest::load_manifest(self.base_dir.join(p))?,
            Some(DataSource::Synth(s)) => SynthParams {
                kind,
                seed: s.seed,
                n_samples: s.n_samples,
                geometry: s.geometry,
                noise_sd: s.noise_sd,
                score_ranges: None,
            }
            .generate()?,
        };
        if ds.kind() != kind {
            return Err(Error::config(format!("/data/{name}"), format!("manifest holds a {:?} dataset", ds.kind())));
        }
        Ok(ds)
    }
}

/// Starting point for a config that uses synthetic data throughout.
pub fn synthetic_defaults(model: ModelSpec, out_dir: PathBuf) -> RunConfig {
    let geometry = ImageGeometry { channels: model.backbone.in_channels, height: model.backbone.height, width: model.backbone.width };
    RunConfig {
        model,
        arms: None,
        pretrain: PretrainConfig::default(),
        finetune: FinetuneConfig::default(),
        data: DataConfig {
            proxy: Some(DataSource::Synth(SynthSource { seed: 1, n_samples: 400, geometry, noise_sd: 0.0 })),
            target: Some(DataSource::Synth(SynthSource {
                seed: 2,
                n_samples: data::DEFAULT_TARGET_N,
                geometry,
                noise_sd: 0.05,
            })),
        },
        eval: EvalConfig::default(),
        out_dir: Some(out_dir),
    }
}
