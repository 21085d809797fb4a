//! Binary checkpoint container.
//!
//! Layout (all integers little-endian `u32`):
//! `"CPRV"`, version, entry count, then per entry: name length, UTF-8 name,
//! rank, extents, and the raw little-endian `f32` samples.

use std::path::Path;

use super::{ParameterSet, Real, Tensor};
use crate::binio::{hex_digest, read_file, write_atomic, Cursor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CPRV";
pub const CHECKPOINT_VERSION: u32 = 1;

impl<T: Real> ParameterSet<T> {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.num_scalars());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (name, t) in self.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.as_f32().to_le_bytes());
            }
        }
        out
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn digest(&self) -> String {
        hex_digest(&self.to_checkpoint_bytes())
    }
}

pub(crate) fn parse_checkpoint(bytes: &[u8], what: &str) -> Result<ParameterSet<f32>> {
    let mut cur = Cursor::new(bytes, what);
    cur.magic(CHECKPOINT_MAGIC)?;
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "{what}: unsupported checkpoint version {version}"
        )));
    }
    let count = cur.u32()?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Format(format!("{what}: parameter name is not UTF-8")))?
            .to_string();
        let rank = cur.u32()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let data = cur.f32s(shape.iter().product())?;
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Format(format!("{what}: tensor `{name}`: {e}")))?;
        params
            .insert(name, tensor)
            .map_err(|e| Error::Format(format!("{what}: {e}")))?;
    }
    cur.finish()?;
    Ok(params)
}

pub fn write_checkpoint<T: Real>(path: &Path, params: &ParameterSet<T>) -> Result<()> {
    write_atomic(path, &params.to_checkpoint_bytes())
}

pub fn read_checkpoint(path: &Path) -> Result<ParameterSet<f32>> {
    parse_checkpoint(&read_file(path)?, &path.display().to_string())
}
