//! Checkpoint files: one safetensors file per saved step holding generator,
//! discriminator and optimizer state, with the run config and step in the
//! header metadata. A `checkpoints.json` index sits next to them.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::generator::Variant;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "checkpoints.json";
const META_KEY: &str = "wavegan";

fn default_variant() -> Variant {
    Variant::BaseIndex
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub step: usize,
    /// Older files without this field load as base-index models.
    #[serde(default = "default_variant")]
    pub variant: Variant,
    pub num_classes: usize,
    pub is_final: bool,
    pub config: RunConfig,
}

pub fn write_checkpoint(path: &Path, meta: &CheckpointMeta, tensors: &HashMap<String, Tensor>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut header = HashMap::new();
    header.insert(META_KEY.to_string(), serde_json::to_string(meta)?);
    let mut sorted: Vec<(&String, &Tensor)> = tensors.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    let tmp = path.with_extension("ckpt.tmp");
    safetensors::serialize_to_file(sorted, Some(header), &tmp)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointMeta, HashMap<String, Tensor>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)?;
    let raw = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{} has no metadata", path.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(raw)?;
    if meta.format_version > CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{} uses format {}, newest supported is {CHECKPOINT_VERSION}",
            path.display(),
            meta.format_version
        )));
    }
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    Ok((meta, tensors))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub step: usize,
    pub file: String,
    #[serde(rename = "final")]
    pub is_final: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub version: u32,
    pub run_id: String,
    pub checkpoints: Vec<IndexEntry>,
}

impl CheckpointIndex {
    pub fn new(run_id: &str) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            run_id: run_id.to_string(),
            checkpoints: Vec::new(),
        }
    }

    pub fn read(run_dir: &Path) -> Result<Option<Self>> {
        let path = run_dir.join(INDEX_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    pub fn write(&self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join(INDEX_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn record(&mut self, step: usize, file: &str, is_final: bool) {
        self.checkpoints.retain(|e| e.step != step);
        self.checkpoints.push(IndexEntry {
            step,
            file: file.to_string(),
            is_final,
        });
        self.checkpoints.sort_by_key(|e| e.step);
    }

    pub fn latest(&self) -> Option<&IndexEntry> {
        self.checkpoints.last()
    }

    pub fn final_checkpoint(&self) -> Option<&IndexEntry> {
        self.checkpoints.iter().rev().find(|e| e.is_final)
    }
}

pub fn checkpoint_file(step: usize) -> String {
    format!("{step}.ckpt")
}

pub fn checkpoint_path(run_dir: &Path, step: usize) -> PathBuf {
    run_dir.join(checkpoint_file(step))
}
