//! Versioned binary checkpoint for network parameters.
//!
//! Layout (little-endian): magic `IRNW`, `u32` format version, config
//! (`u32` levels, `u32` base filters, `u8` batch-norm flag, `u32` kernel
//! size), `u32` tensor count, then per tensor `u32` rank, `u32` dims and
//! `f32` values, in declaration order.

use std::fs;
use std::path::Path;

use super::convnet::{ConvNetConfig, ConvNetParameters};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"IRNW";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ConvNetParameters) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let c = params.config;
    for v in [c.levels, c.base_filters] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(c.use_batchnorm as u8);
    out.extend_from_slice(&(c.kernel_size as u32).to_le_bytes());
    let tensors = params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::Checkpoint("parameter is not representable as finite f32".into()));
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ConvNetParameters> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let levels = r.u32()? as usize;
    let base_filters = r.u32()? as usize;
    let use_batchnorm = match r.take(1)?[0] {
        0 => false,
        1 => true,
        b => return Err(Error::Checkpoint(format!("bad batch-norm flag {b}"))),
    };
    let kernel_size = r.u32()? as usize;
    let config = ConvNetConfig {
        levels,
        base_filters,
        use_batchnorm,
        kernel_size,
    };
    config.validate()?;
    let mut params = ConvNetParameters::zeros_like(config);
    let count = r.u32()? as usize;
    let mut tensors = params.tensors_mut();
    if count != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "config implies {} tensors, file has {count}",
            tensors.len()
        )));
    }
    for (i, t) in tensors.iter_mut().enumerate() {
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != t.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {i}: expected shape {:?}, file has {shape:?}",
                t.shape
            )));
        }
        for v in t.data.iter_mut() {
            let f = r.f32()?;
            if !f.is_finite() {
                return Err(Error::Checkpoint(format!("tensor {i}: non-finite value")));
            }
            *v = f as f64;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ConvNetParameters, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ConvNetParameters> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
