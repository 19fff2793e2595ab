//! `SLWT` named-tensor files.
//!
//! Layout (little-endian): `b"SLWT"`, version `u32`, count `u32`, then per
//! tensor: name length `u16`, UTF-8 name, rank `u8`, `rank` × `u32` dims,
//! `f32` data.

use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SLWT";
pub const VERSION: u32 = 1;

/// Serialise named tensors into a byte buffer.
pub fn to_bytes<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Result<Vec<u8>> {
    let items: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(items.len())
        .map_err(|_| Error::InvalidParam("too many tensors for SLWT".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in items {
        let nb = name.as_bytes();
        let nl = u16::try_from(nb.len())
            .map_err(|_| Error::InvalidParam(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| Error::InvalidParam(format!("{name}: rank too large")))?;
        out.extend_from_slice(&nl.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::InvalidParam(format!("{name}: dimension {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.reserve(t.len() * 4);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("truncated at byte {} (needed {n} more)", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parse a buffer produced by [`to_bytes`]. `path` is used in messages only.
pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut c = Cursor { buf, pos: 0, path };
    if c.take(4)? != MAGIC {
        return Err(Error::format(path, "bad magic (expected SLWT)"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let nl = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(nl)?)
            .map_err(|_| Error::format(path, format!("record {i}: name is not UTF-8")))?
            .to_owned();
        let rank = c.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= buf.len()))
            .ok_or_else(|| Error::format(path, format!("{name}: implausible shape {shape:?}")))?;
        let raw = c.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != buf.len() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes", buf.len() - c.pos),
        ));
    }
    Ok(out)
}

pub fn save<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> Result<()> {
    let bytes = to_bytes(tensors)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&buf, path)
}

/// Write a parameter store, prefixing every name with `prefix`.
pub fn save_store(path: &Path, store: &ParamStore<f32>, prefix: &str) -> Result<()> {
    let names: Vec<String> = store.names().iter().map(|n| format!("{prefix}{n}")).collect();
    save(
        path,
        names.iter().map(String::as_str).zip(store.iter().map(|(_, t)| t)),
    )
}

/// Collect the tensors whose names start with `prefix` into a store, with
/// the prefix removed.
pub fn extract_store(tensors: &[(String, Tensor<f32>)], prefix: &str) -> ParamStore<f32> {
    let mut store = ParamStore::new();
    for (name, t) in tensors {
        if let Some(rest) = name.strip_prefix(prefix) {
            store.add(rest, t.clone());
        }
    }
    store
}
