//! Checkpoint directories: `spec.json` plus `weights/<name>.hcat`.

use std::fs;
use std::path::Path;

use hca_core::model::{Checkpoint, ModelSpec, Phase, Weights};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_file::{load_tensor, save_tensor};

pub const SCHEMA_VERSION: u32 = 1;
pub const SPEC_FILE: &str = "spec.json";
pub const WEIGHT_DIR: &str = "weights";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    schema_version: u32,
    model: ModelSpec,
    seed: u64,
    phase: Phase,
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    let wdir = dir.join(WEIGHT_DIR);
    fs::create_dir_all(&wdir).map_err(|e| Error::io(&wdir, e))?;
    let spec = SpecFile { schema_version: SCHEMA_VERSION, model: ckpt.spec().clone(), seed: ckpt.seed, phase: ckpt.phase };
    let path = dir.join(SPEC_FILE);
    let text = serde_json::to_string_pretty(&spec).expect("spec serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    for (name, t) in ckpt.weights() {
        save_tensor(t, wdir.join(format!("{name}.hcat")))?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(SPEC_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let spec: SpecFile = serde_path_to_error::deserialize(de)
        .map_err(|e| Error::config(format!("{}#{}", path.display(), crate::config::pointer(e.path())), e.inner().to_string()))?;
    if spec.schema_version != SCHEMA_VERSION {
        return Err(Error::config(
            format!("{}#/schema_version", path.display()),
            format!("unsupported schema version {}", spec.schema_version),
        ));
    }
    let mut weights = Weights::new();
    for p in spec.model.params()? {
        let t = load_tensor(dir.join(WEIGHT_DIR).join(format!("{}.hcat", p.name)))?;
        weights.insert(p.name, t);
    }
    Ok(Checkpoint::new(spec.model, weights, spec.seed, spec.phase)?)
}
