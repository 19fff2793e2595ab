//! Teacher embedding stores (`SALT` files) and a synthetic teacher.
//!
//! Layout (little-endian): `b"SALT"`, version `u32` (1), dim `u32`, count
//! `u64`, then per record a `u16` key length, the UTF-8 key and `dim` `f32`
//! values. Clip keys are manifest-relative paths; label vectors use the key
//! `text:<label>`.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SALT";
pub const VERSION: u32 = 1;
/// Accepted deviation of a record's L2 norm from 1 when loading.
pub const NORM_TOL: f64 = 1e-3;
pub const TEXT_PREFIX: &str = "text:";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    /// Loaded from a file; the format carries no tag.
    Real,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherStore {
    pub dim: usize,
    pub provenance: Provenance,
    keys: Vec<String>,
    values: Vec<f32>,
    index: HashMap<String, usize>,
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

impl TeacherStore {
    pub fn new(dim: usize, provenance: Provenance) -> Self {
        Self {
            dim,
            provenance,
            keys: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Add a record after validating length, norm and key uniqueness.
    pub fn insert(&mut self, key: impl Into<String>, v: Vec<f32>) -> Result<()> {
        let key = key.into();
        let i = self.keys.len();
        if v.len() != self.dim {
            return Err(Error::Data(format!(
                "record {i} ({key}): {} values, store dim is {}",
                v.len(),
                self.dim
            )));
        }
        if key.len() > u16::MAX as usize {
            return Err(Error::Data(format!("record {i}: key of {} bytes is too long", key.len())));
        }
        let n = norm(&v);
        if !n.is_finite() || (n - 1.0).abs() > NORM_TOL {
            return Err(Error::Data(format!("record {i} ({key}): norm {n:.6} is not 1")));
        }
        if self.index.contains_key(&key) {
            return Err(Error::Data(format!("record {i}: duplicate key {key}")));
        }
        self.index.insert(key.clone(), i);
        self.keys.push(key);
        self.values.extend_from_slice(&v);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.index.get(key).map(|&i| &self.values[i * self.dim..(i + 1) * self.dim])
    }

    /// `(label, vector)` for every `text:` key, in file order.
    pub fn labels(&self) -> Vec<(&str, &[f32])> {
        self.keys
            .iter()
            .filter_map(|k| k.strip_prefix(TEXT_PREFIX).map(|l| (l, self.get(k).expect("indexed"))))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dim = u32::try_from(self.dim).map_err(|_| Error::InvalidParam(format!("dim {} too large", self.dim)))?;
        let mut out = Vec::with_capacity(20 + self.keys.len() * (2 + 4 * self.dim + 16));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&dim.to_le_bytes());
        out.extend_from_slice(&(self.keys.len() as u64).to_le_bytes());
        for (i, k) in self.keys.iter().enumerate() {
            out.extend_from_slice(&(k.len() as u16).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            for v in &self.values[i * self.dim..(i + 1) * self.dim] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let fmt = |d: String| Error::format(path, d);
        if buf.len() < 20 {
            return Err(fmt("truncated SALT header".into()));
        }
        if &buf[..4] != MAGIC {
            return Err(fmt("bad magic (expected SALT)".into()));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(fmt(format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(buf[12..20].try_into().unwrap());
        if dim == 0 {
            return Err(fmt("dim is 0".into()));
        }
        let mut store = Self::new(dim, Provenance::Real);
        let mut pos = 20;
        for i in 0..count {
            let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
                let s = buf
                    .get(*pos..*pos + n)
                    .ok_or_else(|| fmt(format!("record {i} is truncated")))?;
                *pos += n;
                Ok(s)
            };
            let kl = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let key = std::str::from_utf8(take(&mut pos, kl)?)
                .map_err(|_| fmt(format!("record {i}: key is not UTF-8")))?
                .to_string();
            let v = take(&mut pos, 4 * dim)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            store.insert(key, v).map_err(|e| fmt(e.to_string()))?;
        }
        if pos != buf.len() {
            return Err(fmt(format!("{} trailing bytes", buf.len() - pos)));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, path)
    }
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Orthonormal anchors: Gram-Schmidt on seeded Gaussian vectors.
pub fn anchors(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    if n > dim || n == 0 {
        return Err(Error::InvalidParam(format!("{n} anchors do not fit in {dim} dimensions")));
    }
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        // two passes keep the residual orthogonal to working precision
        for _ in 0..2 {
            for a in &out {
                let d: f64 = v.iter().zip(a).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(a).for_each(|(x, y)| *x -= d * y);
            }
        }
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-12 {
            out.push(normalized(&v));
        }
    }
    Ok(out)
}

/// Store with one orthonormal anchor per label (`text:<label>`) and, per
/// clip, `normalize(anchor + σ·noise)`.
pub fn synth_teacher(clips: &[(String, usize)], labels: &[String], dim: usize, seed: u64, sigma: f64) -> Result<TeacherStore> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParam(format!("noise sigma {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchors = anchors(labels.len(), dim, &mut rng)?;
    let mut store = TeacherStore::new(dim, Provenance::Synthetic);
    for (l, a) in labels.iter().zip(&anchors) {
        store.insert(format!("{TEXT_PREFIX}{l}"), a.iter().map(|&x| x as f32).collect())?;
    }
    for (key, class) in clips {
        let a = anchors
            .get(*class)
            .ok_or_else(|| Error::InvalidParam(format!("clip {key}: class {class} out of range")))?;
        let v: Vec<f64> = a
            .iter()
            .map(|&x| {
                let e: f64 = StandardNormal.sample(&mut rng);
                x + sigma * e
            })
            .collect();
        store.insert(key.clone(), normalized(&v).into_iter().map(|x| x as f32).collect())?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> Vec<String> {
        ["tonal", "noise", "chirp", "percussive"].map(String::from).to_vec()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let clips: Vec<(String, usize)> = (0..3).map(|i| (format!("c/{i}.wav"), i)).collect();
        let s = synth_teacher(&clips, &labels(), 16, 5, 0.3).unwrap();
        let b = s.to_bytes().unwrap();
        let back = TeacherStore::from_bytes(&b, Path::new("t.salt")).unwrap();
        assert_eq!(back.keys(), s.keys());
        for k in s.keys() {
            assert_eq!(back.get(k).unwrap(), s.get(k).unwrap());
        }
        assert_eq!(back.to_bytes().unwrap(), b);
    }

    #[test]
    fn rejects_bad_files() {
        let s = synth_teacher(&[], &labels(), 8, 1, 0.0).unwrap();
        let mut b = s.to_bytes().unwrap();
        let p = Path::new("x");
        b[0] = b'X';
        assert!(TeacherStore::from_bytes(&b, p).is_err());

        let mut half = TeacherStore::new(2, Provenance::Real);
        assert!(half.insert("k", vec![0.5, 0.0]).unwrap_err().to_string().contains("k"));
        half.insert("a", vec![1.0, 0.0]).unwrap();
        assert!(half.insert("a", vec![0.0, 1.0]).is_err());

        // hand-written file whose second record has norm 0.5
        let mut raw = Vec::new();
        raw.extend_from_slice(b"SALT");
        raw.extend_from_slice(&1u32.to_le_bytes());
        raw.extend_from_slice(&2u32.to_le_bytes());
        raw.extend_from_slice(&2u64.to_le_bytes());
        for (k, v) in [("good", [0.6f32, 0.8]), ("bad", [0.3, 0.4])] {
            raw.extend_from_slice(&(k.len() as u16).to_le_bytes());
            raw.extend_from_slice(k.as_bytes());
            v.iter().for_each(|x| raw.extend_from_slice(&x.to_le_bytes()));
        }
        let err = TeacherStore::from_bytes(&raw, p).unwrap_err().to_string();
        assert!(err.contains("record 1") && err.contains("bad"), "{err}");
        assert!(TeacherStore::from_bytes(&raw[..raw.len() - 1], p).is_err());
    }

    #[test]
    fn anchors_are_orthonormal() {
        let clips: Vec<(String, usize)> = (0..8).map(|i| (format!("{i}"), i % 4)).collect();
        let s = synth_teacher(&clips, &labels(), 1024, 2, 0.0).unwrap();
        let l = s.labels();
        assert_eq!(l.len(), 4);
        for (i, (_, a)) in l.iter().enumerate() {
            assert!((norm(a) - 1.0).abs() < 1e-6);
            for (_, b) in &l[i + 1..] {
                let d: f64 = a.iter().zip(*b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
                assert!(d.abs() < 1e-6);
            }
        }
        for (k, c) in &clips {
            assert_eq!(s.get(k).unwrap(), l[*c].1);
        }
        assert_eq!(synth_teacher(&clips, &labels(), 1024, 2, 0.0).unwrap(), s);
        assert!(synth_teacher(&clips, &labels(), 3, 2, 0.0).is_err());
    }
}
