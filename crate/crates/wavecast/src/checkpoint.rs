//! Checkpoint container.
//!
//! Layout: the 8-byte magic `WAVECKPT`, a little-endian `u32` format
//! version, a `u64` header length, a JSON header, then every parameter as
//! little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wavecast_core::model::ModelConfig;
use wavecast_core::substrate::{ParamSet, Tensor};

use crate::error::{AppError, AppResult};

const MAGIC: &[u8; 8] = b"WAVECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    /// Offset into the value blob, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `t2t` after semantic pretraining, `forecast` after the main stage.
    pub stage: String,
    pub protocol: String,
    pub dataset: String,
    pub config_hash: String,
    pub seed: u64,
    pub train_windows: usize,
    pub steps: usize,
    pub model: ModelConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    params: Vec<ParamEntry>,
    hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet,
}

/// SHA-256 over parameter names, shapes and values, in name order.
pub fn param_hash(params: &ParamSet) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

impl Checkpoint {
    pub fn hash(&self) -> String {
        param_hash(&self.params)
    }

    pub fn to_bytes(&self) -> AppResult<Vec<u8>> {
        let mut entries = Vec::new();
        let mut offset = 0;
        for (name, t) in self.params.iter() {
            entries.push(ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                frozen: self.params.is_frozen(name),
                offset,
            });
            offset += t.len();
        }
        let header = Header { meta: self.meta.clone(), params: entries, hash: self.hash() };
        let json = serde_json::to_vec(&header).map_err(|e| AppError::Data(format!("checkpoint header: {e}")))?;
        let mut out = Vec::with_capacity(20 + json.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> AppResult<Checkpoint> {
        let bad = |m: &str| AppError::Data(format!("checkpoint: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20usize.saturating_add(len)).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
        let blob = &bytes[20 + len..];
        if !blob.len().is_multiple_of(8) {
            return Err(bad("value blob is not a whole number of f64"));
        }
        let values: Vec<f64> = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let mut params = ParamSet::new();
        for e in &header.params {
            let n: usize = e.shape.iter().product();
            let slice = values.get(e.offset..e.offset + n).ok_or_else(|| bad(&format!("{} runs past the blob", e.name)))?;
            params.insert(e.name.clone(), Tensor::new(e.shape.clone(), slice.to_vec())?);
            if e.frozen {
                params.freeze(&e.name)?;
            }
        }
        let ckpt = Checkpoint { meta: header.meta, params };
        if ckpt.hash() != header.hash {
            return Err(bad("parameter hash mismatch"));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> AppResult<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| AppError::io(path, e))
    }

    pub fn load(path: &Path) -> AppResult<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            AppError::Data(m) => AppError::Data(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
