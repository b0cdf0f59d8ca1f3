//! Trainable-only checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SIGMACKP"  u32 version=1  u32 count
//! count × { u16 name_len, name, u8 rank, rank × u64 dim, u8 dtype, payload }
//! 32-byte SHA-256 of the canonical model config JSON
//! ```
//!
//! `dtype` 0 is f32 and 1 is f64. Writers always emit f64.

use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SIGMACKP";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;
const HEADER_BYTES: usize = 8 + 4 + 4;
const FINGERPRINT_BYTES: usize = 32;

pub type Fingerprint = [u8; 32];

/// SHA-256 of the config's JSON with object keys sorted.
pub fn fingerprint<T: Serialize>(config: &T) -> Result<Fingerprint> {
    let value = serde_json::to_value(config).map_err(|e| Error::Format(e.to_string()))?;
    let text = serde_json::to_string(&value).map_err(|e| Error::Format(e.to_string()))?;
    Ok(Sha256::digest(text.as_bytes()).into())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub fingerprint: Fingerprint,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(encoded_size(self.tensors.iter().map(|(n, t)| (n.as_str(), t.shape()))));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(DTYPE_F64);
            out.extend_from_slice(&t.to_le_bytes());
        }
        out.extend_from_slice(&self.fingerprint);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Format(format!("{name}: shape overflow")))?;
            let data = match r.u8()? {
                DTYPE_F64 => r
                    .take(numel.checked_mul(8).ok_or_else(|| Error::Format("payload overflow".into()))?)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                DTYPE_F32 => r
                    .take(numel.checked_mul(4).ok_or_else(|| Error::Format("payload overflow".into()))?)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                other => return Err(Error::Format(format!("{name}: unknown dtype {other}"))),
            };
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        let fingerprint: Fingerprint = r.take(FINGERPRINT_BYTES)?.try_into().unwrap();
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { tensors, fingerprint })
    }

    /// Errors unless the checkpoint was written for a config with this fingerprint.
    pub fn check_fingerprint(&self, expected: &Fingerprint) -> Result<()> {
        if &self.fingerprint != expected {
            return Err(Error::Format("config fingerprint mismatch".into()));
        }
        Ok(())
    }
}

/// Exact file size for tensors of these names and shapes.
pub fn encoded_size<'a>(entries: impl IntoIterator<Item = (&'a str, &'a [usize])>) -> usize {
    HEADER_BYTES
        + entries
            .into_iter()
            .map(|(name, shape)| 2 + name.len() + 1 + 8 * shape.len() + 1 + 8 * shape.iter().product::<usize>())
            .sum::<usize>()
        + FINGERPRINT_BYTES
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ck.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
