//! Binary checkpoint: `SFODCKPT`, u32 version, u64 header length, JSON
//! header (architecture, array manifest, metadata), then every array as
//! little-endian f32 in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sfod::detector::{ArchDescriptor, ModelState, ParamKind, StateError};
use sfod::Tensor;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"SFODCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint architecture does not match the expected descriptor")]
    ArchMismatch,
    #[error(transparent)]
    State(#[from] StateError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    #[serde(default)]
    pub label: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch: ArchDescriptor,
    arrays: Vec<ArrayEntry>,
    meta: CheckpointMeta,
}

pub fn encode(model: &ModelState<f32>, meta: &CheckpointMeta) -> Vec<u8> {
    let header = Header {
        arch: model.arch().clone(),
        arrays: model
            .entries()
            .map(|(name, kind, t)| ArrayEntry {
                name: name.to_string(),
                kind,
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let payload: usize = model.tensors().iter().map(|t| 4 * t.len()).sum();
    let mut out = Vec::with_capacity(20 + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(ModelState<f32>, CheckpointMeta), CheckpointError> {
    let bad = |m: String| CheckpointError::Format(m);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing SFODCKPT magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(bad("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
    let mut payload = &body[hlen..];
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for entry in &header.arrays {
        let n: usize = entry.shape.iter().product();
        if payload.len() < 4 * n {
            return Err(bad(format!("payload of `{}` truncated", entry.name)));
        }
        let data = payload[..4 * n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        payload = &payload[4 * n..];
        let t = Tensor::from_vec(&entry.shape, data).map_err(|e| bad(e.to_string()))?;
        arrays.push((entry.name.clone(), t));
    }
    if !payload.is_empty() {
        return Err(bad(format!("{} trailing bytes", payload.len())));
    }
    let model = ModelState::from_named(&header.arch, arrays)?;
    for (entry, kind) in header.arrays.iter().zip(model.kinds()) {
        if entry.kind != *kind {
            return Err(bad(format!("`{}` recorded as {:?}, expected {:?}", entry.name, entry.kind, kind)));
        }
    }
    Ok((model, header.meta))
}

pub fn save(path: &Path, model: &ModelState<f32>, meta: &CheckpointMeta) -> Result<(), CheckpointError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| CheckpointError::Io {
            path: parent.display().to_string(),
            source,
        })?;
    }
    fs::write(path, encode(model, meta)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a checkpoint; with `expected`, a differing architecture is an error.
pub fn load(path: &Path, expected: Option<&ArchDescriptor>) -> Result<(ModelState<f32>, CheckpointMeta), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let (model, meta) = decode(&bytes)?;
    if expected.is_some_and(|a| a != model.arch()) {
        return Err(CheckpointError::ArchMismatch);
    }
    Ok((model, meta))
}
