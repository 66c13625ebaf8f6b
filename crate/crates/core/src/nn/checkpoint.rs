//! Checkpoint files: a JSON manifest followed by `ATNS` tensors.
//!
//! Layout: the 8 magic bytes `ATNSCKPT`, the manifest length as a little-endian
//! `u64`, the manifest JSON, then every tensor in `ATNS` encoding back to back.
//! Manifest offsets are relative to the first byte after the manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ATNSCKPT";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub offset: u64,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    /// Free-form configuration block (the model config for model checkpoints).
    #[serde(default)]
    pub config: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn encode(store: &ParamStore, config: serde_json::Value) -> Result<Vec<u8>> {
    let mut body = Vec::new();
    let mut records = Vec::with_capacity(store.len());
    for e in store.entries() {
        records.push(TensorRecord {
            name: e.name.clone(),
            offset: body.len() as u64,
            shape: e.tensor.shape().to_vec(),
            trainable: e.kind == ParamKind::Trainable,
        });
        e.tensor
            .write_atns(&mut body)
            .expect("writing to a Vec cannot fail");
    }
    let manifest = serde_json::to_vec(&Manifest { config, tensors: records })?;
    let mut out = Vec::with_capacity(16 + manifest.len() + body.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        let shown = &bytes[..bytes.len().min(8)];
        return Err(Error::Format(format!("bad checkpoint magic {shown:?}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body_start = 16 + len;
    if bytes.len() < body_start {
        return Err(Error::Format("truncated checkpoint manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..body_start])?;
    let body = &bytes[body_start..];
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for r in &manifest.tensors {
        let start = r.offset as usize;
        if start > body.len() {
            return Err(Error::Format(format!("tensor {} offset past end of file", r.name)));
        }
        let t = Tensor::read_atns(&body[start..])?;
        if t.shape() != r.shape.as_slice() {
            return Err(Error::Format(format!("tensor {} shape disagrees with manifest", r.name)));
        }
        tensors.push((r.name.clone(), t));
    }
    Ok(Checkpoint {
        config: manifest.config,
        tensors,
    })
}

pub fn save(path: &Path, store: &ParamStore, config: serde_json::Value) -> Result<()> {
    let bytes = encode(store, config)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
