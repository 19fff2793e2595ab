//! `SLZ1` latent files.
//!
//! Layout (little-endian): `b"SLZ1"`, version `u32`, sample rate `u32`, hop
//! `u32`, time factor `u32`, `D` `u32`, `M` `u64`, then `D×M` `f32` values
//! of μ, row-major with one row per latent channel.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SLZ1";
pub const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 * 5 + 8;

#[derive(Clone, Debug, PartialEq)]
pub struct LatentFile {
    pub sample_rate: u32,
    pub hop: u32,
    pub time_factor: u32,
    pub dim: usize,
    pub frames: usize,
    /// `dim × frames`, row-major.
    pub mu: Vec<f32>,
}

impl LatentFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.mu.len() != self.dim * self.frames {
            return Err(Error::shape(
                "slz1",
                format!("{} values for D={}, M={}", self.mu.len(), self.dim, self.frames),
            ));
        }
        let dim = u32::try_from(self.dim)
            .map_err(|_| Error::InvalidParam(format!("latent dim {} too large", self.dim)))?;
        let mut out = Vec::with_capacity(HEADER + 4 * self.mu.len());
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.sample_rate, self.hop, self.time_factor, dim] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.frames as u64).to_le_bytes());
        for v in &self.mu {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        if buf.len() < HEADER {
            return Err(Error::format(path, "truncated SLZ1 header"));
        }
        if &buf[..4] != MAGIC {
            return Err(Error::format(path, "bad magic (expected SLZ1)"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let dim = u32_at(20) as usize;
        let frames = u64::from_le_bytes(buf[24..32].try_into().unwrap());
        let frames = usize::try_from(frames)
            .map_err(|_| Error::format(path, "frame count overflows"))?;
        let n = dim
            .checked_mul(frames)
            .filter(|n| n.checked_mul(4).is_some_and(|b| b == buf.len() - HEADER))
            .ok_or_else(|| {
                Error::format(
                    path,
                    format!("D={dim}, M={frames} does not match {} data bytes", buf.len() - HEADER),
                )
            })?;
        let mu = buf[HEADER..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect::<Vec<_>>();
        debug_assert_eq!(mu.len(), n);
        Ok(Self {
            sample_rate: u32_at(8),
            hop: u32_at(12),
            time_factor: u32_at(16),
            dim,
            frames,
            mu,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let f = LatentFile {
            sample_rate: 16000,
            hop: 256,
            time_factor: 8,
            dim: 3,
            frames: 2,
            mu: vec![0.5, -1.0, 2.0, 1e-30, f32::MAX, -0.0],
        };
        let b = f.to_bytes().unwrap();
        assert_eq!(b.len(), 32 + 24);
        let back = LatentFile::from_bytes(&b, Path::new("m")).unwrap();
        assert_eq!(back.to_bytes().unwrap(), b);
        assert!(LatentFile::from_bytes(&b[..b.len() - 4], Path::new("m")).is_err());
        let mut bad = b.clone();
        bad[3] = b'2';
        assert!(LatentFile::from_bytes(&bad, Path::new("m")).is_err());
    }
}
