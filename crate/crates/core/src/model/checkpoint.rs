//! Binary checkpoint container.
//!
//! Layout: the 8 magic bytes `DAECKPT1`, a little-endian `u32` length, that
//! many bytes of UTF-8 JSON metadata, then every tensor as raw little-endian
//! `f32` in directory order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dae, DaeConfig};
use crate::diffusion::ScheduleParams;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DAECKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingProgress {
    pub samples_seen: usize,
    pub steps: usize,
    /// `(samples seen, held-out reconstruction MSE)` at each milestone.
    pub milestones: Vec<(usize, f64)>,
    pub final_val_mse: Option<f64>,
}

/// Trained model plus the metadata persisted with it.
#[derive(Clone, Debug)]
pub struct DaeCheckpoint {
    pub model: Dae<f32>,
    pub progress: TrainingProgress,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    format_version: u32,
    config: DaeConfig,
    schedule: ScheduleParams,
    progress: TrainingProgress,
    tensors: Vec<TensorEntry>,
}

impl DaeCheckpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let tensors = self
            .model
            .params()
            .entries()
            .iter()
            .map(|e| {
                let entry = TensorEntry {
                    name: e.name.clone(),
                    dtype: "f32".into(),
                    shape: e.shape.clone(),
                    offset,
                    len: e.data.len() * 4,
                };
                offset += entry.len;
                entry
            })
            .collect();
        let meta = Metadata {
            format_version: FORMAT_VERSION,
            config: self.model.config().clone(),
            schedule: self.model.config().schedule,
            progress: self.progress.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(12 + json.len() + offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for e in self.model.params().entries() {
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(path, reason);
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing DAECKPT1 magic"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let json = bytes.get(12..12 + len).ok_or_else(|| bad("truncated metadata"))?;
        let meta: Metadata = serde_json::from_slice(json)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {}", meta.format_version)));
        }
        if meta.schedule != meta.config.schedule {
            return Err(bad("schedule block disagrees with config"));
        }
        meta.config.validate()?;
        let payload = &bytes[12 + len..];
        let mut model = Dae::<f32>::init(meta.config, 0);
        let entries = model.params_mut().entries_mut();
        if entries.len() != meta.tensors.len() {
            return Err(bad(&format!(
                "config implies {} tensors, directory lists {}",
                entries.len(),
                meta.tensors.len()
            )));
        }
        let mut expected_offset = 0;
        for (entry, t) in entries.iter_mut().zip(&meta.tensors) {
            if entry.name != t.name || entry.shape != t.shape || t.dtype != "f32" {
                return Err(bad(&format!("tensor {} does not match the configured architecture", t.name)));
            }
            if t.offset != expected_offset || t.len != entry.data.len() * 4 {
                return Err(bad(&format!("tensor {} has inconsistent offset or length", t.name)));
            }
            let raw = payload
                .get(t.offset..t.offset + t.len)
                .ok_or_else(|| bad("truncated tensor payload"))?;
            for (v, chunk) in entry.data.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
            expected_offset += t.len;
        }
        if payload.len() != expected_offset {
            return Err(bad("trailing bytes after tensor payload"));
        }
        Ok(Self {
            model,
            progress: meta.progress,
        })
    }
}

pub fn save_checkpoint(ckpt: &DaeCheckpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<DaeCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    DaeCheckpoint::from_bytes(&bytes, path)
}
