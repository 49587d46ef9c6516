//! Checkpoint directory: `checkpoint.json` (config plus name → file table)
//! and one FMTC f32 file per parameter under `params/`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{param_specs, DecoderParams, ParamTensor};
use super::DecoderConfig;
use crate::error::{Error, Result};
use crate::store::container::{read_tensor, write_tensor, Dtype};

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    file: String,
    dims: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    config: DecoderConfig,
    params: Vec<Entry>,
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    params: &DecoderParams<f32>,
    cfg: &DecoderConfig,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("params")).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(params.len());
    for p in params.iter() {
        let file = format!("params/{}.fmtc", p.name);
        write_tensor(dir.join(&file), &p.tensor, Dtype::F32)?;
        entries.push(Entry {
            name: p.name.clone(),
            file,
            dims: p.tensor.dims().to_vec(),
        });
    }
    let manifest = CheckpointManifest {
        config: cfg.clone(),
        params: entries,
    };
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Loads a checkpoint and checks it against the shapes its config implies.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(DecoderConfig, DecoderParams<f32>)> {
    let dir = dir.as_ref();
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let specs = param_specs(&manifest.config)?;
    if specs.len() != manifest.params.len() {
        return Err(Error::data(format!(
            "checkpoint lists {} parameters, config implies {}",
            manifest.params.len(),
            specs.len()
        )));
    }
    let mut params = DecoderParams::new();
    for (spec, entry) in specs.iter().zip(&manifest.params) {
        if spec.name != entry.name {
            return Err(Error::data(format!(
                "checkpoint parameter {} where {} expected",
                entry.name, spec.name
            )));
        }
        let tensor = read_tensor(dir.join(&entry.file))?;
        if tensor.dims() != spec.dims.as_slice() {
            return Err(Error::data(format!(
                "{}: dims {:?}, config implies {:?}",
                entry.name,
                tensor.dims(),
                spec.dims
            )));
        }
        params.insert(ParamTensor::new(entry.name.clone(), tensor));
    }
    Ok((manifest.config, params))
}
