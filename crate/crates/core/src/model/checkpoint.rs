//! Versioned binary checkpoint format.
//!
//! All integers are little-endian `u32`, floats little-endian `f64`:
//!
//! ```text
//! magic      8 bytes  "PFOCKPT\0"
//! version    u32      currently 1
//! config     5 × u32  vocab_size, d_model, n_layers, n_heads, max_seq_len
//! frozen     u8       0 or 1
//! n_tensors  u32
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims (ndim × u32)
//!   data     product(dims) × f64
//! ```
//!
//! Tensors appear in the model's fixed layout order, so `load → save`
//! reproduces the input bytes exactly.

use std::path::Path;

use super::config::LMConfig;
use super::params::LMParams;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PFOCKPT\0";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn to_bytes(params: &LMParams) -> Result<Vec<u8>> {
    let cfg = params.config();
    let mut out = Vec::with_capacity(64 + params.num_parameters() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        cfg.vocab_size,
        cfg.d_model,
        cfg.n_layers,
        cfg.n_heads,
        cfg.max_seq_len,
    ] {
        put_u32(&mut out, v)?;
    }
    out.push(u8::from(params.is_frozen()));
    put_u32(&mut out, params.tensors().len())?;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.ndim())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<LMParams> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let config = LMConfig {
        vocab_size: r.u32()?,
        d_model: r.u32()?,
        n_layers: r.u32()?,
        n_heads: r.u32()?,
        max_seq_len: r.u32()?,
    };
    let frozen = match r.take(1)?[0] {
        0 => false,
        1 => true,
        b => return Err(Error::Checkpoint(format!("invalid frozen flag {b}"))),
    };
    let n = r.u32()?;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let data = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last tensor",
            buf.len() - r.pos
        )));
    }
    LMParams::from_parts(config, tensors, frozen)
}

pub fn save(params: &LMParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(params)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<LMParams> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}
