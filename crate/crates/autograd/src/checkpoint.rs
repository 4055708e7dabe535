//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "RTTA"                  4-byte magic
//! version                 currently 1
//! count                   number of parameters
//! count times:
//!   name_len, name        UTF-8 bytes, no terminator
//!   rank, extents[rank]
//!   data                  product(extents) little-endian f32 values
//! ```
//!
//! Parameters are written in [`ParamSet`] order. Values are always stored as
//! `f32`; loading into an `f64` set widens them.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::param::ParamSet;
use crate::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"RTTA";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode<T: Real>(params: &ParamSet<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * params.num_elements());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize)?;
    put_u32(&mut out, params.len())?;
    for p in params.iter() {
        put_u32(&mut out, p.name.len())?;
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.rank())?;
        for &d in p.value.shape() {
            put_u32(&mut out, d)?;
        }
        for &x in p.value.data() {
            out.extend_from_slice(&(x.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Decodes a checkpoint into `(name, tensor)` pairs in file order.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Format(format!("parameter name is not UTF-8: {e}")))?
            .to_owned();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format("extent overflow".into()))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("extent overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
        out.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

/// Writes through a temporary file and renames it into place.
pub fn save<T: Real>(params: &ParamSet<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(params)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads values into an existing set. Every parameter of `params` must be
/// present with a matching shape; extra entries in the file are an error.
pub fn load_into<T: Real>(params: &mut ParamSet<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::new();
    fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    load_bytes_into(params, &bytes)
}

pub fn load_bytes_into<T: Real>(params: &mut ParamSet<T>, bytes: &[u8]) -> Result<()> {
    let entries = decode::<T>(bytes)?;
    if entries.len() != params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, model expects {}",
            entries.len(),
            params.len()
        )));
    }
    for (name, tensor) in entries {
        params
            .set_value(&name, tensor)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(())
}
