use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

const FORMAT: &str = "morphseg-checkpoint-1";
const PARAMS_FILE: &str = "params.bin";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    /// Trainable parameter.
    Param,
    /// Norm-layer running statistic.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub kind: EntryKind,
    pub tensor: Tensor<f32>,
}

/// Named tensors plus a step counter and a free-form config, stored as a
/// directory holding `params.bin` (f32 little-endian, concatenated in entry
/// order) and `manifest.json`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub entries: Vec<CheckpointEntry>,
    pub config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    kind: EntryKind,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    step: u64,
    entries: Vec<ManifestEntry>,
    config: serde_json::Value,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut bytes = Vec::new();
        let mut entries = Vec::with_capacity(self.entries.len());
        let mut offset = 0;
        for e in &self.entries {
            entries.push(ManifestEntry {
                name: e.name.clone(),
                kind: e.kind,
                shape: e.tensor.shape().to_vec(),
                offset,
            });
            for v in e.tensor.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            offset += e.tensor.numel();
        }
        let manifest = Manifest { format: FORMAT.into(), step: self.step, entries, config: self.config.clone() };
        let p = dir.join(PARAMS_FILE);
        fs::write(&p, bytes).map_err(|e| Error::io(p, e))?;
        let m = dir.join(MANIFEST_FILE);
        fs::write(&m, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(m, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = dir.join(MANIFEST_FILE);
        let text = fs::read(&m).map_err(|e| Error::io(&m, e))?;
        let manifest: Manifest = serde_json::from_slice(&text)?;
        if manifest.format != FORMAT {
            return Err(Error::format("format", format!("unsupported checkpoint format `{}`", manifest.format)));
        }
        let p = dir.join(PARAMS_FILE);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::PayloadSize { expected: bytes.len() / 4 * 4 + 4, found: bytes.len() });
        }
        let values: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let total: usize = manifest.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if total != values.len() {
            return Err(Error::PayloadSize { expected: total * 4, found: bytes.len() });
        }
        let mut entries = Vec::with_capacity(manifest.entries.len());
        for e in manifest.entries {
            let n: usize = e.shape.iter().product();
            let data = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::format(e.name.clone(), "offset out of range"))?
                .to_vec();
            entries.push(CheckpointEntry { name: e.name, kind: e.kind, tensor: Tensor::new(e.shape, data)? });
        }
        Ok(Self { step: manifest.step, entries, config: manifest.config })
    }
}
