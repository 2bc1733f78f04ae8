//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "AP3DCKPT"  magic (8 bytes)
//! u32         format version
//! u32         entry count
//! per entry:  u32 name length, UTF-8 name, u32 rank, rank × u64 extents,
//!             product(extents) × f32 values (row-major)
//! ```

use std::path::Path;

use ndarray::IxDyn;

use crate::error::{Error, Result};
use crate::layers::Named;
use crate::tensor::Array;

pub const MAGIC: &[u8; 8] = b"AP3DCKPT";
pub const VERSION: u32 = 1;

pub fn encode(entries: &[(String, Array)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, a) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(a.ndim() as u32).to_le_bytes());
        for &e in a.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in a.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Array)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Format(format!("entry name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("extent overflows usize".into()))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Format(format!("'{name}' has an impossible shape {shape:?}")))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        let values: Vec<f64> =
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        let a = Array::from_shape_vec(IxDyn(&shape), values).map_err(|e| Error::Format(e.to_string()))?;
        entries.push((name, a));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(entries)
}

pub fn snapshot(state: &[Named]) -> Vec<(String, Array)> {
    state.iter().map(|(n, t)| (n.clone(), t.to_array())).collect()
}

pub fn save(path: &Path, state: &[Named]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode(&snapshot(state)))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Array)>> {
    decode(&std::fs::read(path)?)
}
