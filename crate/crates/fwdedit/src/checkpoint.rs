//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "HTED" | version: u32 | config_len: u32 | config JSON
//! n_tensors: u32
//! per tensor: name_len: u32 | name | rank: u32 | dims: u64 * rank | f32 * prod(dims)
//! ```
//!
//! Weights are stored as 32-bit floats. Saving refuses any weight that a
//! 32-bit float cannot hold exactly, so a save/load cycle never changes a
//! model silently.

use std::fs;
use std::io::Write;
use std::path::Path;

use fwdedit_core::model::{ModelConfig, TransformerModel};
use fwdedit_core::Tensor;

use crate::error::{FwdError, Result};
use crate::output::write_atomic;

pub const MAGIC: &[u8; 4] = b"HTED";
pub const VERSION: u32 = 1;

/// Serializes `model` to bytes.
pub fn encode(model: &TransformerModel) -> std::result::Result<Vec<u8>, String> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = serde_json::to_vec(model.config()).map_err(|e| e.to_string())?;
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    let tensors = model.named_tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for (i, v) in t.data().iter().enumerate() {
            let f = *v as f32;
            if f as f64 != *v {
                return Err(format!("{name}[{i}] = {v:e} is not exactly representable as f32"));
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(model: &TransformerModel, path: &Path) -> Result<()> {
    let bytes = encode(model).map_err(|m| FwdError::format(path, m))?;
    write_atomic(path, |f| f.write_all(&bytes))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(FwdError::format(self.path, format!("truncated while reading {what} at byte {}", self.pos))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses checkpoint bytes; `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<TransformerModel> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(FwdError::format(path, "bad magic bytes, not a checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(FwdError::UnsupportedVersion {
            path: path.into(),
            found: version,
            supported: VERSION,
        });
    }
    let n = r.u32("config length")? as usize;
    let config: ModelConfig =
        serde_json::from_slice(r.take(n, "config")?).map_err(|e| FwdError::format(path, format!("config JSON: {e}")))?;
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let n = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|_| FwdError::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 4 {
            return Err(FwdError::format(path, format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dims")? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .filter(|l| l.checked_mul(4).is_some())
            .ok_or_else(|| FwdError::format(path, format!("tensor {name} is too large")))?;
        let raw = r.take(len * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| FwdError::format(path, e.to_string()))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(FwdError::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    TransformerModel::from_tensors(config, tensors).map_err(|e| FwdError::format(path, e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<TransformerModel> {
    let bytes = fs::read(path).map_err(|e| FwdError::io(path, e))?;
    decode(&bytes, path)
}
