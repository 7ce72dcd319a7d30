//! Binary checkpoint format.
//!
//! ```text
//! "PGPT" | version: u32 LE | header_len: u32 LE | header JSON | payload
//! ```
//!
//! The header holds the [`ModelConfig`] and a manifest of `(name, shape,
//! offset)` entries; `offset` is the byte offset into the payload, which is
//! every tensor's data as f32 LE in manifest order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PGPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    NotCheckpoint,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated: need {needed} bytes, have {actual}")]
    Truncated { needed: usize, actual: usize },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint does not match the model layout: {0}")]
    Layout(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn to_bytes(params: &ModelParams) -> Vec<u8> {
    let mut offset = 0;
    let tensors = params
        .names()
        .iter()
        .zip(params.tensors())
        .map(|(name, t)| {
            let e = Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.numel() * 4;
            e
        })
        .collect();
    let header = Header {
        config: params.config().clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn take(bytes: &[u8], at: usize, len: usize) -> Result<&[u8]> {
    bytes.get(at..at + len).ok_or(CheckpointError::Truncated {
        needed: at + len,
        actual: bytes.len(),
    })
}

fn u32_at(bytes: &[u8], at: usize) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, at, 4)?.try_into().expect("4 bytes")))
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::NotCheckpoint);
    }
    let version = u32_at(bytes, 4)?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let header_len = u32_at(bytes, 8)? as usize;
    let header: Header = serde_json::from_slice(take(bytes, 12, header_len)?)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let base = 12 + header_len;
    let mut expected_offset = 0;
    let mut named = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        if e.offset != expected_offset {
            return Err(CheckpointError::Header(format!(
                "tensor {} at offset {} (expected {expected_offset})",
                e.name, e.offset
            )));
        }
        let numel: usize = e.shape.iter().product();
        let raw = take(bytes, base + e.offset, numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(e.shape, data).map_err(|err| CheckpointError::Header(err.to_string()))?;
        named.push((e.name, t));
        expected_offset += numel * 4;
    }
    if bytes.len() != base + expected_offset {
        return Err(CheckpointError::Header(format!(
            "{} trailing bytes after payload",
            bytes.len() - (base + expected_offset)
        )));
    }
    Ok(ModelParams::from_named(&header.config, named)?)
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    Ok(write_atomic(path, &to_bytes(params))?)
}

pub fn load(path: &Path) -> Result<ModelParams> {
    from_bytes(&std::fs::read(path)?)
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
