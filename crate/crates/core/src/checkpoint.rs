//! Versioned binary records of named tensors with a JSON metadata header.
//!
//! Layout (little endian): 8-byte magic, `u32` version, `u64` metadata length
//! and UTF-8 JSON metadata, `u32` tensor count, then per tensor a `u32` name
//! length and name, `u32` rank, `u64` dims and `f64` data.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn encode(magic: &[u8; 8], metadata: &str, tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(metadata.len() as u64).to_le_bytes());
    out.extend_from_slice(metadata.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(magic: &[u8; 8], bytes: &[u8]) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != magic {
        return Err(Error::Format(format!(
            "bad magic, expected {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let meta_len = r.u64()? as usize;
    let meta = r.string(meta_len)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok((meta, tensors))
}

pub fn write(path: &Path, magic: &[u8; 8], metadata: &str, tensors: &[(String, &Tensor)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(magic, metadata, tensors)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path, magic: &[u8; 8]) -> Result<(String, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(magic, &bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// SHA-256 over names, shapes and exact bit patterns.
pub fn checksum<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> String {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
