//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `LAMMVIT1`, a little-endian `u32` header length,
//! a JSON header `{format_version, config, manifest}`, then every tensor's
//! values as little-endian `f32` in manifest order.
//!
//! Parameters are stored at 32-bit precision. A loaded model therefore
//! reproduces a saved model exactly once the saved model has been passed
//! through [`Model::round_to_f32`].

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"LAMMVIT1";
pub const FORMAT_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u64,
    pub config: ModelConfig,
    pub manifest: Vec<ManifestEntry>,
}

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        manifest: model
            .store
            .iter()
            .map(|p| ManifestEntry {
                name: p.name().to_string(),
                dtype: "f32".into(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| CheckpointError::Header("header too large".into()))?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * model.store.scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.store.iter() {
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let len_bytes: [u8; 4] = bytes
        .get(8..12)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| CheckpointError::Truncated("header length".into()))?;
    let len = u32::from_le_bytes(len_bytes) as usize;
    let json = bytes
        .get(12..12 + len)
        .ok_or_else(|| CheckpointError::Truncated("header".into()))?;
    let value: serde_json::Value =
        serde_json::from_slice(json).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let version = value.get("format_version").and_then(|v| v.as_u64());
    match version {
        Some(FORMAT_VERSION) => {}
        Some(v) => return Err(CheckpointError::Version(v).into()),
        None => return Err(CheckpointError::Header("missing format_version".into()).into()),
    }
    let header: Header = serde_json::from_value(value).map_err(|e| CheckpointError::Header(e.to_string()))?;

    let mut model = Model::new(header.config, 0)?;
    if header.manifest.len() != model.store.len() {
        return Err(CheckpointError::Manifest(format!(
            "{} tensors in file, model has {}",
            header.manifest.len(),
            model.store.len()
        ))
        .into());
    }
    let mut offset = 12 + len;
    for (entry, param) in header.manifest.iter().zip(model.store.iter_mut()) {
        if entry.name != param.name() {
            return Err(CheckpointError::Manifest(format!("expected tensor {}, found {}", param.name(), entry.name)).into());
        }
        if entry.dtype != "f32" {
            return Err(CheckpointError::Manifest(format!("{}: unsupported dtype {}", entry.name, entry.dtype)).into());
        }
        if entry.shape != param.value.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: entry.name.clone(),
                file: entry.shape.clone(),
                model: param.value.shape().to_vec(),
            }
            .into());
        }
        let n = param.value.len();
        let raw = bytes
            .get(offset..offset + 4 * n)
            .ok_or_else(|| CheckpointError::Truncated(entry.name.clone()))?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        param.value = Tensor::new(entry.shape.clone(), data)?;
        offset += 4 * n;
    }
    if offset != bytes.len() {
        return Err(CheckpointError::Manifest(format!("{} trailing bytes", bytes.len() - offset)).into());
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes)
}
