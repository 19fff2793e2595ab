//! Synthetic labelled corpora: tonal, noise, chirp and percussive clips.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dsp::{write_wav, AudioClip, WavFormat};
use crate::error::{Error, Result};

pub const CLASSES: [&str; 4] = ["tonal", "noise", "chirp", "percussive"];

/// Short raised-cosine fades at both ends.
fn fade(x: &mut [f64], sr: f64) {
    let n = ((0.01 * sr) as usize).min(x.len() / 2);
    for i in 0..n {
        let g = 0.5 - 0.5 * (PI * i as f64 / n as f64).cos();
        x[i] *= g;
        let j = x.len() - 1 - i;
        x[j] *= g;
    }
}

fn tonal(len: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let f0 = rng.gen_range(150.0..600.0);
    let harmonics = rng.gen_range(3..=5);
    let vib_rate = rng.gen_range(3.0..7.0);
    let vib_depth = rng.gen_range(0.0..0.01);
    let mut phase = vec![rng.gen_range(0.0..2.0 * PI); harmonics];
    (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            let f = f0 * (1.0 + vib_depth * (2.0 * PI * vib_rate * t).sin());
            let mut v = 0.0;
            for (k, ph) in phase.iter_mut().enumerate() {
                let h = (k + 1) as f64;
                *ph += 2.0 * PI * f * h / sr;
                v += ph.sin() / h;
            }
            0.25 * v
        })
        .collect()
}

fn noise(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // one-pole low-pass with a random corner
    let a: f64 = rng.gen_range(0.0..0.9);
    let mut s = 0.0;
    (0..len)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            s = a * s + (1.0 - a) * e;
            0.3 * s / (1.0 - a).sqrt().max(0.3)
        })
        .collect()
}

fn chirp(len: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (mut f1, mut f2): (f64, f64) = (rng.gen_range(200.0..1000.0), rng.gen_range(2000.0..6000.0));
    if rng.gen_bool(0.5) {
        std::mem::swap(&mut f1, &mut f2);
    }
    let dur = len as f64 / sr;
    let k = (f2 / f1).ln() / dur;
    let mut ph = rng.gen_range(0.0..2.0 * PI);
    (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            ph += 2.0 * PI * f1 * (k * t).exp() / sr;
            0.3 * ph.sin()
        })
        .collect()
}

fn percussive(len: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut x = vec![0.0; len];
    let mut at = rng.gen_range(0..(0.05 * sr) as usize + 1);
    while at < len {
        let decay = rng.gen_range(0.005..0.02) * sr;
        let amp = rng.gen_range(0.4..0.8);
        for (i, v) in x[at..].iter_mut().enumerate().take((6.0 * decay) as usize) {
            let e: f64 = StandardNormal.sample(rng);
            *v += amp * e * (-(i as f64) / decay).exp();
        }
        at += rng.gen_range((0.06 * sr) as usize..(0.15 * sr) as usize);
    }
    x
}

/// One clip of class `class` (index into [`CLASSES`]).
pub fn synth_clip(class: usize, len: usize, sample_rate: u32, seed: u64) -> Result<AudioClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let mut x = match class {
        0 => tonal(len, sr, &mut rng),
        1 => noise(len, &mut rng),
        2 => chirp(len, sr, &mut rng),
        3 => percussive(len, sr, &mut rng),
        _ => return Err(Error::InvalidParam(format!("synthetic class {class} out of range"))),
    };
    fade(&mut x, sr);
    AudioClip::new(x.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect(), sample_rate)
}

#[derive(Clone, Debug)]
pub struct SynthItem {
    pub key: String,
    pub class: usize,
    pub clip: AudioClip,
}

/// `per_class` clips of every class, interleaved by class.
pub fn synth_corpus(per_class: usize, len: usize, sample_rate: u32, seed: u64) -> Result<Vec<SynthItem>> {
    let mut out = Vec::with_capacity(per_class * CLASSES.len());
    for i in 0..per_class {
        for (c, name) in CLASSES.iter().enumerate() {
            let s = seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add((i * CLASSES.len() + c) as u64);
            out.push(SynthItem {
                key: format!("{name}/{name}_{i:04}.wav"),
                class: c,
                clip: synth_clip(c, len, sample_rate, s)?,
            });
        }
    }
    Ok(out)
}

/// Write the clips under `dir` plus a labelled `manifest.tsv`; returns the
/// manifest path.
pub fn write_corpus(items: &[SynthItem], dir: &Path) -> Result<PathBuf> {
    let mut manifest = String::new();
    for it in items {
        let path = dir.join(&it.key);
        if let Some(p) = path.parent() {
            std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
        }
        write_wav(&path, &it.clip, WavFormat::Float32)?;
        manifest.push_str(&format!("{}\t{}\n", it.key, CLASSES[it.class]));
    }
    let m = dir.join("manifest.tsv");
    std::fs::write(&m, manifest).map_err(|e| Error::io(&m, e))?;
    Ok(m)
}
