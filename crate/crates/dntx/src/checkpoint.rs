//! The `.dntc` tensor container.
//!
//! Layout: the 5 magic bytes `DNTC1`, a little-endian `u64` manifest length,
//! the manifest as JSON, then a blob of little-endian `f32` values. Manifest
//! offsets are relative to the blob start.

use std::path::Path;

use dntx_core::nn::ParamStore;
use dntx_core::pipeline::{Model, ModelConfig};
use dntx_core::synth::DatasetConfig;
use dntx_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CheckpointError, Error, Result};

pub const MAGIC: &[u8; 5] = b"DNTC1";
pub const FORMAT_VERSION: u32 = 1;
pub const EXTENSION: &str = "dntc";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Named `f32` tensors plus a free-form configuration snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn byte_len(shape: &[usize]) -> Option<u64> {
    shape.iter().try_fold(4u64, |acc, &d| acc.checked_mul(d as u64))
}

impl Checkpoint {
    pub fn new(config: serde_json::Value) -> Self {
        Self { config, tensors: Vec::new() }
    }

    pub fn from_store(store: &ParamStore<f32>, config: serde_json::Value) -> Self {
        let tensors = store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        Self { config, tensors }
    }

    pub fn push(&mut self, name: &str, tensor: Tensor<f32>) {
        self.tensors.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry { name: name.clone(), dtype: "f32".into(), shape: t.shape().to_vec(), byte_offset: offset });
            offset += 4 * t.len() as u64;
        }
        let manifest = Manifest { format_version: FORMAT_VERSION, config: self.config.clone(), tensors: entries };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(13 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses and validates a whole container; nothing is returned unless
    /// every tensor is present and consistent.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let rest = &bytes[MAGIC.len()..];
        if rest.len() < 8 {
            return Err(CheckpointError::Truncated("missing manifest length".into()));
        }
        let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes"));
        let rest = &rest[8..];
        if (rest.len() as u64) < len {
            return Err(CheckpointError::Truncated(format!("manifest of {len} bytes, {} available", rest.len())));
        }
        let (json, blob) = rest.split_at(len as usize);
        let value: serde_json::Value = serde_json::from_slice(json).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        // the version is checked before the rest of the schema
        let version = value.get("format_version").and_then(|v| v.as_u64()).ok_or_else(|| CheckpointError::Manifest("no format_version".into()))?;
        if version != FORMAT_VERSION as u64 {
            return Err(CheckpointError::Version(version.min(u32::MAX as u64) as u32));
        }
        let manifest: Manifest = serde_json::from_value(value).map_err(|e| CheckpointError::Manifest(e.to_string()))?;

        let mut spans = Vec::with_capacity(manifest.tensors.len());
        let mut total = 0u64;
        for e in &manifest.tensors {
            if e.dtype != "f32" {
                return Err(CheckpointError::Manifest(format!("tensor {} has dtype {}", e.name, e.dtype)));
            }
            let n = byte_len(&e.shape).ok_or_else(|| CheckpointError::Manifest(format!("tensor {} is too large", e.name)))?;
            let end = e.byte_offset.checked_add(n).ok_or_else(|| CheckpointError::Manifest(format!("tensor {} offset overflows", e.name)))?;
            spans.push((e.byte_offset, end, e.name.as_str()));
            total += n;
        }
        let mut names: Vec<&str> = manifest.tensors.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(CheckpointError::Manifest(format!("tensor {} appears twice", w[0])));
        }
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(CheckpointError::Manifest(format!("tensors {} and {} overlap", w[0].2, w[1].2)));
            }
        }
        let extent = spans.last().map_or(0, |s| s.1);
        if extent != total {
            return Err(CheckpointError::Manifest(format!("tensors cover {extent} bytes but sum to {total}")));
        }
        if (blob.len() as u64) < total {
            return Err(CheckpointError::Truncated(format!("blob holds {} of {total} bytes", blob.len())));
        }
        if blob.len() as u64 > total {
            return Err(CheckpointError::Manifest(format!("{} trailing bytes after the blob", blob.len() as u64 - total)));
        }

        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let start = e.byte_offset as usize;
            let n: usize = e.shape.iter().product();
            let data = blob[start..start + 4 * n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::from_vec(&e.shape, data).map_err(|err| CheckpointError::Manifest(err.to_string()))?;
            tensors.push((e.name, t));
        }
        Ok(Self { config: manifest.config, tensors })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        let tmp = path.with_extension("dntc.partial");
        std::fs::write(&tmp, self.to_bytes()).map_err(Error::io(&tmp))?;
        std::fs::rename(&tmp, path).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        Ok(Self::from_bytes(&bytes)?)
    }

    /// Overwrites every parameter of `store` from this checkpoint. The
    /// names and shapes must match exactly, with nothing left over.
    pub fn restore(&self, store: &mut ParamStore<f32>) -> Result<(), CheckpointError> {
        if self.tensors.len() != store.len() {
            return Err(CheckpointError::Mismatch(format!("{} tensors for {} parameters", self.tensors.len(), store.len())));
        }
        for (name, t) in &self.tensors {
            let id = store.find(name).ok_or_else(|| CheckpointError::Mismatch(format!("unknown parameter {name}")))?;
            if store.get(id).shape() != t.shape() {
                return Err(CheckpointError::Mismatch(format!("{name} has shape {:?}, model expects {:?}", t.shape(), store.get(id).shape())));
            }
        }
        for (name, t) in &self.tensors {
            let id = store.find(name).expect("checked");
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }
}

/// A model checkpoint's configuration section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub model: ModelConfig,
    /// Geometry (basis seed, vertex count, camera) the model was trained on.
    pub dataset: DatasetConfig,
    /// Training stages already applied (`decouple`, `audio`, `end_to_end`).
    #[serde(default)]
    pub stages: Vec<String>,
    /// The run configuration that produced the weights.
    #[serde(default)]
    pub run: serde_json::Value,
}

pub fn save_model(path: &Path, snapshot: &ModelSnapshot, store: &ParamStore<f32>) -> Result<()> {
    let config = serde_json::to_value(snapshot).expect("snapshot serializes");
    Checkpoint::from_store(store, config).save(path)
}

/// A model rebuilt from a checkpoint, with a content hash as its id.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub snapshot: ModelSnapshot,
    pub model: Model,
    pub store: ParamStore<f32>,
    pub model_id: String,
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    let snapshot: ModelSnapshot =
        serde_json::from_value(ck.config.clone()).map_err(|e| CheckpointError::Manifest(format!("model configuration: {e}")))?;
    let mut store = ParamStore::new();
    let model = Model::new(&snapshot.model, &mut store)?;
    ck.restore(&mut store)?;
    let digest = Sha256::digest(&bytes);
    let model_id = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
    Ok(LoadedModel { snapshot, model, store, model_id })
}
