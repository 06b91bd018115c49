//! `LMP1` checkpoints: a directory holding `meta.json` and `params.bin`
//! (little-endian f32 blobs concatenated in registry order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "LMP1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub step: u64,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
    pub params: Vec<ParamEntry>,
}

impl CheckpointMeta {
    pub fn new(step: u64, config_hash: impl Into<String>) -> Self {
        CheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            step,
            config_hash: config_hash.into(),
            corpus_hash: None,
            role: None,
            params: Vec::new(),
        }
    }
}

/// Writes every parameter of `store`; `meta.params` is filled in here.
pub fn save_checkpoint(dir: &Path, store: &ParamStore, mut meta: CheckpointMeta) -> Result<CheckpointMeta> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    meta.format = CHECKPOINT_FORMAT.into();
    meta.params = store
        .iter()
        .map(|(_, p)| ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec() })
        .collect();
    let mut blob = Vec::with_capacity(store.num_values() * 4);
    for (_, p) in store.iter() {
        for &v in p.value.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let bin = dir.join("params.bin");
    fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
    let meta_path = dir.join("meta.json");
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    Ok(meta)
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(Error::Format {
            format: CHECKPOINT_FORMAT,
            path: meta_path,
            detail: format!("format tag `{}`", meta.format),
        });
    }
    Ok(meta)
}

/// Reads a checkpoint into named tensors.
pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointMeta, Vec<(String, Tensor)>)> {
    let meta = read_meta(dir)?;
    let bin = dir.join("params.bin");
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let total: usize = meta.params.iter().map(|p| numel(&p.shape)).sum();
    if bytes.len() != total * 4 {
        return Err(Error::Format {
            format: CHECKPOINT_FORMAT,
            path: bin,
            detail: format!("expected {} bytes, found {}", total * 4, bytes.len()),
        });
    }
    let mut out = Vec::with_capacity(meta.params.len());
    let mut off = 0;
    for entry in &meta.params {
        let n = numel(&entry.shape);
        let data = bytes[off..off + n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        off += n * 4;
        out.push((entry.name.clone(), Tensor::new(&entry.shape, data)?));
    }
    Ok((meta, out))
}

/// Loads a checkpoint into an already-built store; names and shapes must match.
pub fn load_into(dir: &Path, store: &mut ParamStore) -> Result<CheckpointMeta> {
    let (meta, tensors) = load_checkpoint(dir)?;
    if tensors.len() != store.len() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint has {} parameters, model has {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, t) in tensors {
        let id = store
            .id(&name)
            .ok_or_else(|| Error::ConfigMismatch(format!("unknown parameter `{name}` in checkpoint")))?;
        let p = store.get_mut(id);
        if p.value.shape() != t.shape() {
            return Err(Error::ConfigMismatch(format!(
                "parameter `{name}`: checkpoint shape {:?}, model shape {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t;
    }
    Ok(meta)
}
