//! Binary blob container used for checkpoints and feature files.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic    4 bytes  b"CASC"
//! version  u32      currently 1
//! meta_len u64      length of the UTF-8 JSON metadata that follows
//! meta     bytes    arbitrary JSON (config snapshot, dataset info, ...)
//! count    u32      number of blobs
//! per blob:
//!   name_len u16, name bytes (UTF-8)
//!   dtype    u8   0 = f32, 1 = i32
//!   ndim     u8, dims u32 * ndim
//!   payload_len u64, payload bytes (little-endian scalars)
//! checksum 32 bytes SHA-256 of everything before it
//! ```
//! Truncation, bad magic, unsupported version and checksum mismatch are
//! reported as distinct errors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"CASC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Blob {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    I32 { shape: Vec<usize>, data: Vec<i32> },
}

impl Blob {
    pub fn from_tensor(t: &Tensor) -> Self {
        Blob::F32 { shape: t.shape.clone(), data: t.data.clone() }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        match self {
            Blob::F32 { shape, data } => Ok(Tensor::new(shape.clone(), data.clone())),
            Blob::I32 { .. } => Err(Error::Checkpoint("expected f32 blob, found i32".into())),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Blob::F32 { shape, .. } => shape,
            Blob::I32 { shape, .. } => shape,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub blobs: Vec<(String, Blob)>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Container { meta, blobs: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, blob: Blob) {
        self.blobs.push((name.into(), blob));
    }

    pub fn get(&self, name: &str) -> Option<&Blob> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, b)| b)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::Checkpoint(format!("metadata serialize: {e}")))?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (name, blob) in &self.blobs {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize {
                return Err(Error::Checkpoint(format!("blob name too long: {name}")));
            }
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            let (dtype, shape): (u8, &[usize]) = match blob {
                Blob::F32 { shape, .. } => (0, shape),
                Blob::I32 { shape, .. } => (1, shape),
            };
            out.push(dtype);
            if shape.len() > u8::MAX as usize {
                return Err(Error::Checkpoint("blob rank too large".into()));
            }
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match blob {
                Blob::F32 { data, .. } => {
                    out.extend_from_slice(&((data.len() * 4) as u64).to_le_bytes());
                    for v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Blob::I32 { data, .. } => {
                    out.extend_from_slice(&((data.len() * 4) as u64).to_le_bytes());
                    for v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 32 {
            return Err(Error::Checkpoint("truncated container: shorter than header".into()));
        }
        let (body, stored_sum) = bytes.split_at(bytes.len() - 32);
        let digest = Sha256::digest(body);
        if digest.as_slice() != stored_sum {
            return Err(Error::Checkpoint("checksum mismatch: container corrupted".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic bytes {magic:?}")));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported container version {version} (expected {VERSION})"
            )));
        }
        let meta_len = r.u64()? as usize;
        let meta_bytes = r.take(meta_len)?;
        let meta = serde_json::from_slice(meta_bytes)
            .map_err(|e| Error::Checkpoint(format!("metadata parse: {e}")))?;
        let count = r.u32()? as usize;
        let mut blobs = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("blob name is not UTF-8".into()))?;
            let dtype = r.u8()?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let payload_len = r.u64()? as usize;
            if payload_len != numel * 4 {
                return Err(Error::Checkpoint(format!(
                    "blob {name}: payload length {payload_len} does not match shape {shape:?}"
                )));
            }
            let payload = r.take(payload_len)?;
            let blob = match dtype {
                0 => {
                    let data = payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    Blob::F32 { shape, data }
                }
                1 => {
                    let data = payload
                        .chunks_exact(4)
                        .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    Blob::I32 { shape, data }
                }
                other => {
                    return Err(Error::Checkpoint(format!("blob {name}: unknown dtype tag {other}")))
                }
            };
            blobs.push((name, blob));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after final blob".into()));
        }
        Ok(Container { meta, blobs })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes()?)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(&path)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated container: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Container {
        let mut c = Container::new(json!({"kind": "test", "n": 3}));
        c.push("a", Blob::F32 { shape: vec![2, 2], data: vec![1.0, -2.5, 0.0, 7.25] });
        c.push("b", Blob::I32 { shape: vec![3], data: vec![4, 5, -6] });
        c
    }

    #[test]
    fn roundtrip_bit_identical() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(c, back);
        // save -> load -> save is byte-identical
        assert_eq!(bytes, back.to_bytes().unwrap());
    }

    #[test]
    fn corrupted_byte_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        let err = Container::from_bytes(&bytes).unwrap_err();
        assert!(format!("{err}").contains("checksum"), "{err}");
    }

    #[test]
    fn truncation_detected() {
        let bytes = sample().to_bytes().unwrap();
        let err = Container::from_bytes(&bytes[..bytes.len() - 7]).unwrap_err();
        // either checksum or truncation depending on cut point; both explicit
        let msg = format!("{err}");
        assert!(msg.contains("checksum") || msg.contains("truncated"), "{msg}");
    }

    #[test]
    fn bad_magic_and_version_detected() {
        let good = sample().to_bytes().unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        // re-sign so the checksum passes and magic is the failure
        let body_len = bad.len() - 32;
        let digest = Sha256::digest(&bad[..body_len]);
        bad[body_len..].copy_from_slice(&digest);
        let err = Container::from_bytes(&bad).unwrap_err();
        assert!(format!("{err}").contains("magic"), "{err}");

        let mut bad = good;
        bad[4] = 99;
        let body_len = bad.len() - 32;
        let digest = Sha256::digest(&bad[..body_len]);
        bad[body_len..].copy_from_slice(&digest);
        let err = Container::from_bytes(&bad).unwrap_err();
        assert!(format!("{err}").contains("version"), "{err}");
    }

    #[test]
    fn lookup_by_name() {
        let c = sample();
        assert!(c.get("a").is_some());
        assert!(c.get("missing").is_none());
        assert_eq!(c.get("b").unwrap().shape(), &[3]);
    }
}
