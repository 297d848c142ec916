//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "AVATCKPT"
//! version  u32
//! header   u64 length + UTF-8 JSON {"model": ModelConfig, "extra": any}
//! count    u32
//! tensor*  u32 name length, name bytes, u32 rank, u64 dims..., f64 values...
//! digest   32 bytes SHA-256 of everything above
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::model::{ModelConfig, ModelParams, Param};

pub const MAGIC: &[u8; 8] = b"AVATCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint digest mismatch (file corrupted)")]
    Digest,
    #[error("checkpoint header is invalid: {0}")]
    Header(String),
    #[error("checkpoint tensors do not match its model configuration: {0}")]
    Incompatible(String),
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Serializes `params` with an arbitrary JSON `extra` section.
pub fn to_bytes(params: &ModelParams, extra: &serde_json::Value) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        model: params.config().clone(),
        extra: extra.clone(),
    })
    .expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(Param::COUNT as u32).to_le_bytes());
    for (p, t) in Param::ALL.iter().zip(params.tensors()) {
        let name = p.name().as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Truncated)
    }
}

/// Parses a checkpoint, returning the parameters and the `extra` section.
pub fn from_bytes(bytes: &[u8]) -> Result<(ModelParams, serde_json::Value), CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let mut r = Reader { buf: bytes, pos: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    if bytes.len() < 8 + 4 + 32 {
        return Err(CheckpointError::Truncated);
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Digest);
    }
    let mut r = Reader { buf: body, pos: 12 };
    let header_len = r.len()?;
    let header: Header =
        serde_json::from_slice(r.take(header_len)?).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let count = r.u32()? as usize;
    if count != Param::COUNT {
        return Err(CheckpointError::Incompatible(format!(
            "{count} tensors, expected {}",
            Param::COUNT
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for p in Param::ALL {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
        if name != p.name() {
            return Err(CheckpointError::Incompatible(format!(
                "found tensor {name:?} where {:?} was expected",
                p.name()
            )));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Incompatible(format!("{name}: {e}")))?;
        tensors.push(t);
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Header("trailing bytes".into()));
    }
    let model = header.model;
    let params = ModelParams::from_tensors(model.clone(), tensors)
        .ok_or_else(|| CheckpointError::Incompatible(format!("tensor shapes disagree with {model:?}")))?;
    Ok((params, header.extra))
}

pub fn save(path: &Path, params: &ModelParams, extra: &serde_json::Value) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(params, extra)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<(ModelParams, serde_json::Value), CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}
