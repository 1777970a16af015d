//! Checkpoint byte format.
//!
//! ```text
//! magic    b"DRNMTCKP"
//! version  u32 LE
//! config   u64 LE length + UTF-8 canonical config text
//! count    u64 LE number of tensors
//! per tensor:
//!   name   u64 LE length + UTF-8 bytes
//!   rank   u64 LE
//!   extent u64 LE × rank
//!   values f64 LE × Π extents
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::{Error, ModelConfig, ParameterSet, Real, Result, Tensor};

pub const MAGIC: &[u8; 8] = b"DRNMTCKP";
pub const VERSION: u32 = 1;

pub fn to_bytes<T: Real>(params: &ParameterSet<T>, config: &ModelConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = config.to_text();
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.values() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated file while reading {what}")));
        };
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        let remaining = (self.bytes.len() - self.at) as u64;
        if n > remaining {
            return Err(Error::Checkpoint(format!("truncated file: {what} = {n}")));
        }
        Ok(n as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.len(what)?;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

/// Parses a checkpoint and checks every tensor against the layout of the
/// embedded config.
pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<(ParameterSet<T>, ModelConfig)> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let text = r.string("config")?;
    let config = ModelConfig::from_text(&text)?;
    let count = r.len("tensor count")?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.len("rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.len("extent")?);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?;
        let raw = r.take(numel.saturating_mul(8), "values")?;
        let values = raw
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        let t = Tensor::new(shape, values).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        params.push(name, t)?;
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    params.check_layout(&config)?;
    Ok((params, config))
}
