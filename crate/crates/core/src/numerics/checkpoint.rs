//! Flat binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PMSS" | version: u32 | entry count: u32 | entry*
//! entry = name len: u16 | UTF-8 name | dtype: u8 (0 = f64, 1 = f32)
//!       | rank: u8 | extents: u64 * rank | raw element data
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PMSS";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64 = 0,
    F32 = 1,
}

pub fn write_entry<W: Write>(w: &mut W, name: &str, t: &Tensor, dtype: DType) -> Result<()> {
    let name_len = u16::try_from(name.len())
        .map_err(|_| Error::Checkpoint(format!("name too long: {} bytes", name.len())))?;
    let rank = u8::try_from(t.shape().len()).map_err(|_| Error::Checkpoint("rank above 255".into()))?;
    w.write_all(&name_len.to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[dtype as u8, rank])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 8);
    match dtype {
        DType::F64 => t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => t.data().iter().for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated data: {e}")))?;
    Ok(buf)
}

pub fn read_entry<R: Read>(r: &mut R) -> Result<(String, Tensor, DType)> {
    let name_len = u16::from_le_bytes(read_exact(r)?) as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name).map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
    let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
    let [tag, rank] = read_exact::<_, 2>(r)?;
    let dtype = match tag {
        0 => DType::F64,
        1 => DType::F32,
        other => return Err(Error::Checkpoint(format!("unknown dtype tag {other} in `{name}`"))),
    };
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let d = u64::from_le_bytes(read_exact(r)?);
        shape.push(usize::try_from(d).map_err(|_| Error::Checkpoint("extent overflow".into()))?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Checkpoint("extent overflow".into()))?;
    let width = if dtype == DType::F64 { 8 } else { 4 };
    let mut raw = vec![0u8; numel * width];
    r.read_exact(&mut raw).map_err(|e| Error::Checkpoint(format!("truncated `{name}`: {e}")))?;
    let data = match dtype {
        DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
    Ok((name, t, dtype))
}

/// Serializes named `f64` tensors in the given order.
pub fn encode<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        write_entry(&mut out, name, t, DType::F64)?;
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = bytes;
    let magic: [u8; 4] = read_exact(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != VERSION {
        return Err(Error::Version { found: version, expected: VERSION });
    }
    let count = u32::from_le_bytes(read_exact(&mut r)?);
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let (name, t, _) = read_entry(&mut r)?;
        entries.push((name, t));
    }
    if !r.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
    }
    Ok(entries)
}

pub fn save<'a>(path: &Path, entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    std::fs::write(path, encode(entries)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&std::fs::read(path)?)
}
