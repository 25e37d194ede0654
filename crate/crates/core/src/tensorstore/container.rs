//! `FPQT` container, little-endian throughout:
//!
//! ```text
//! "FPQT" | u32 version=1 | u64 count
//! per tensor: u32 name_len | name (UTF-8) | u8 dtype=0 | u8 rank | rank x u64 dims | f32 payload
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FPQT";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn write_container_bytes(tensors: &[Tensor]) -> Vec<u8> {
    let payload: usize = tensors.iter().map(|t| t.numel() * 4 + t.name().len() + 16).sum();
    let mut out = Vec::with_capacity(16 + payload);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name().len() as u32).to_le_bytes());
        out.extend_from_slice(t.name().as_bytes());
        out.push(DTYPE_F32);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_container(path: impl AsRef<Path>, tensors: &[Tensor]) -> Result<()> {
    for t in tensors {
        if t.rank() > u8::MAX as usize {
            return Err(Error::Shape(format!("{}: rank {} too large", t.name(), t.rank())));
        }
    }
    write_atomic(path.as_ref(), &write_container_bytes(tensors))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "need {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn read_container_bytes(buf: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = Reader { buf, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let count = r.u64("tensor count")?;
    let mut tensors = Vec::new();
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|e| Error::Malformed(format!("tensor {i}: name is not UTF-8: {e}")))?
            .to_string();
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Dtype(dtype));
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = r.u64("dimension")?;
            if d == 0 {
                return Err(Error::Shape(format!("{name}: zero-sized dimension")));
            }
            numel = numel
                .checked_mul(d)
                .filter(|n| *n <= (usize::MAX / 4) as u64)
                .ok_or_else(|| Error::Shape(format!("{name}: element count overflows")))?;
            shape.push(d as usize);
        }
        let bytes = r.take(numel as usize * 4, "payload")?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(name, shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after {count} tensors",
            buf.len() - r.pos
        )));
    }
    Ok(tensors)
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    read_container_bytes(&fs::read(path)?)
}
