//! Binary checkpoint format.
//!
//! ```text
//! "MFIL" | version u32 | kind str | seed u64 | config str | count u32 |
//!   count x (name str | rank u32 | rank x u64 extents | f64 payload)
//! ```
//! All integers and floats are little-endian; `str` is a u32 byte length
//! followed by UTF-8.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::scalar::Real;
use crate::tensor_core::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"MFIL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub kind: String,
    pub seed: u64,
    /// JSON snapshot of the configuration that produced the tensors.
    pub config: String,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Checkpoint<T> {
    pub fn from_store(kind: impl Into<String>, seed: u64, config: impl Into<String>, store: &ParamStore<T>) -> Self {
        Self { kind: kind.into(), seed, config: config.into(), tensors: store.named_tensors() }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

pub fn write_checkpoint<T: Real>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    for (name, _) in &ckpt.tensors {
        ensure!(seen.insert(name.as_str()), "duplicate tensor name {name:?} in checkpoint");
    }
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(FORMAT_VERSION.to_le_bytes());
    put_str(&mut out, &ckpt.kind);
    out.extend(ckpt.seed.to_le_bytes());
    put_str(&mut out, &ckpt.config);
    out.extend((ckpt.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.tensors {
        put_str(&mut out, name);
        out.extend((t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend((e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend(v.as_f64().to_le_bytes());
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
        match self.pos.checked_add(n) {
            Some(end) if end <= self.bytes.len() => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => Err(Error::Truncated { offset: self.bytes.len() }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let at = self.pos;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Checkpoint(format!("invalid UTF-8 string at byte {at}")))
    }
}

pub fn read_checkpoint<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    r.pos = 4;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let kind = r.string()?;
    let seed = r.u64()?;
    let config = r.string()?;
    let count = r.u32()?;
    let mut tensors = Vec::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let name = r.string()?;
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("duplicate tensor name {name:?}")));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        let mut numel = 1usize;
        for _ in 0..rank {
            let e = usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("extent overflows usize".into()))?;
            numel = numel.checked_mul(e).ok_or_else(|| Error::Checkpoint("tensor size overflow".into()))?;
            shape.push(e);
        }
        let payload = r.take(numel.checked_mul(8).ok_or(Error::Truncated { offset: bytes.len() })?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after tensor table", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { kind, seed, config, tensors })
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn save_checkpoint<T: Real>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    write_atomic(path, &write_checkpoint(ckpt)?)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
