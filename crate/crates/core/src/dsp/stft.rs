//! Short-time Fourier analysis/synthesis with a periodic Hann window.
//!
//! Framing convention (fixed): frames are centred, frame `m` covers samples
//! `[m·hop − win/2, m·hop − win/2 + win)` of the input, and the input is
//! reflect-padded at both ends. A signal of `T` samples yields
//! `M = ceil(T / hop)` frames and `F = win/2 + 1` bins.
//!
//! Spectra are stored as two `F×M` row-major planes (real, imaginary). The
//! adjoint routines are the exact transposes of analysis and synthesis and
//! back the differentiable STFT operators of the autodiff graph.

use std::any::{Any, TypeId};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Real;

pub struct StftPlan<T: Real> {
    win: usize,
    hop: usize,
    window: Vec<T>,
    fft: Arc<dyn Fft<T>>,
    ifft: Arc<dyn Fft<T>>,
}

impl<T: Real> std::fmt::Debug for StftPlan<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftPlan")
            .field("win", &self.win)
            .field("hop", &self.hop)
            .finish()
    }
}

type PlanCache = Mutex<HashMap<(TypeId, usize, usize), Arc<dyn Any + Send + Sync>>>;

fn plan_cache() -> &'static PlanCache {
    static CACHE: OnceLock<PlanCache> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Periodic Hann window of length `n`.
pub fn hann<T: Real>(n: usize) -> Vec<T> {
    (0..n)
        .map(|i| {
            let ph = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            T::lit(0.5 - 0.5 * ph.cos())
        })
        .collect()
}

impl<T: Real> StftPlan<T> {
    pub fn new(win: usize, hop: usize) -> Result<Self> {
        if win < 2 || hop == 0 || hop > win {
            return Err(Error::InvalidParam(format!(
                "stft: need 0 < hop <= win and win >= 2, got win {win}, hop {hop}"
            )));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            win,
            hop,
            window: hann(win),
            fft: planner.plan_fft_forward(win),
            ifft: planner.plan_fft_inverse(win),
        })
    }

    /// Shared plan for `(win, hop)`; plans are built once per element type.
    pub fn cached(win: usize, hop: usize) -> Result<Arc<Self>> {
        let key = (TypeId::of::<T>(), win, hop);
        let mut cache = plan_cache().lock().unwrap_or_else(|e| e.into_inner());
        if let Some(p) = cache.get(&key) {
            if let Ok(p) = Arc::clone(p).downcast::<Self>() {
                return Ok(p);
            }
        }
        let plan = Arc::new(Self::new(win, hop)?);
        cache.insert(key, plan.clone() as Arc<dyn Any + Send + Sync>);
        Ok(plan)
    }

    /// Like [`StftPlan::cached`] but rejects window/hop pairs whose
    /// overlap-added Hann windows are not constant (needed for synthesis).
    pub fn cached_cola(win: usize, hop: usize) -> Result<Arc<Self>> {
        let plan = Self::cached(win, hop)?;
        if !plan.is_cola() {
            return Err(Error::InvalidParam(format!(
                "istft: Hann window {win} with hop {hop} does not satisfy COLA"
            )));
        }
        Ok(plan)
    }

    pub fn win(&self) -> usize {
        self.win
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn window(&self) -> &[T] {
        &self.window
    }

    pub fn bins(&self) -> usize {
        self.win / 2 + 1
    }

    pub fn frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }

    fn pad_left(&self) -> usize {
        self.win / 2
    }

    fn padded_len(&self, frames: usize) -> usize {
        (frames.max(1) - 1) * self.hop + self.win
    }

    /// Constant overlap-add check for the analysis window.
    pub fn is_cola(&self) -> bool {
        let mut acc = vec![0.0f64; self.hop];
        for (i, w) in hann::<f64>(self.win).into_iter().enumerate() {
            acc[i % self.hop] += w;
        }
        let mean = acc.iter().sum::<f64>() / self.hop as f64;
        mean > 0.0 && acc.iter().all(|a| (a - mean).abs() <= 1e-9 * mean)
    }

    fn reflect(&self, i: usize, len: usize) -> usize {
        let j = i as isize - self.pad_left() as isize;
        let last = len as isize - 1;
        let r = if j < 0 {
            -j
        } else if j > last {
            2 * last - j
        } else {
            j
        };
        r as usize
    }

    fn check_len(&self, len: usize) -> Result<usize> {
        if len == 0 {
            return Err(Error::InvalidParam("stft: empty signal".into()));
        }
        let frames = self.frames(len);
        let right = self.padded_len(frames).saturating_sub(self.pad_left() + len);
        if self.pad_left() >= len || right >= len {
            return Err(Error::InvalidParam(format!(
                "stft: signal of {len} samples too short for window {}",
                self.win
            )));
        }
        Ok(frames)
    }

    /// Analyse `x`, writing `F×M` real and imaginary planes.
    pub fn analyze(&self, x: &[T], re: &mut [T], im: &mut [T]) -> Result<usize> {
        let len = x.len();
        let frames = self.check_len(len)?;
        let bins = self.bins();
        debug_assert!(re.len() == bins * frames && im.len() == bins * frames);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.win];
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); self.fft.get_inplace_scratch_len()];
        for m in 0..frames {
            let start = m * self.hop;
            for (n, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(self.window[n] * x[self.reflect(start + n, len)], T::zero());
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..bins {
                re[k * frames + m] = buf[k].re;
                im[k * frames + m] = buf[k].im;
            }
        }
        Ok(frames)
    }

    /// Transpose of [`StftPlan::analyze`]: maps plane gradients to a
    /// gradient over the `len` input samples.
    pub fn analyze_adjoint(&self, gre: &[T], gim: &[T], len: usize, gx: &mut [T]) -> Result<()> {
        let frames = self.check_len(len)?;
        let bins = self.bins();
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.win];
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); self.ifft.get_inplace_scratch_len()];
        for m in 0..frames {
            buf.iter_mut().for_each(|b| *b = Complex::new(T::zero(), T::zero()));
            for k in 0..bins {
                buf[k] = Complex::new(gre[k * frames + m], gim[k * frames + m]);
            }
            self.ifft.process_with_scratch(&mut buf, &mut scratch);
            let start = m * self.hop;
            for (n, b) in buf.iter().enumerate() {
                gx[self.reflect(start + n, len)] += self.window[n] * b.re;
            }
        }
        Ok(())
    }

    fn envelope(&self, frames: usize) -> Vec<T> {
        let mut env = vec![T::zero(); self.padded_len(frames)];
        for m in 0..frames {
            for (n, w) in self.window.iter().enumerate() {
                env[m * self.hop + n] += *w * *w;
            }
        }
        env
    }

    fn check_synth(&self, frames: usize, len: usize) -> Result<Vec<T>> {
        if frames == 0 || len == 0 {
            return Err(Error::InvalidParam("istft: empty spectrogram".into()));
        }
        if self.pad_left() + len > self.padded_len(frames) {
            return Err(Error::InvalidParam(format!(
                "istft: {frames} frames cannot produce {len} samples"
            )));
        }
        let env = self.envelope(frames);
        let tiny = T::lit(1e-10);
        if env[self.pad_left()..self.pad_left() + len].iter().any(|&e| e <= tiny) {
            return Err(Error::InvalidParam(
                "istft: window envelope vanishes inside the output".into(),
            ));
        }
        Ok(env)
    }

    /// Weighted overlap-add synthesis of `len` samples from `F×M` planes.
    pub fn synthesize(&self, re: &[T], im: &[T], frames: usize, len: usize) -> Result<Vec<T>> {
        let env = self.check_synth(frames, len)?;
        let bins = self.bins();
        let n = self.win;
        let norm = T::one() / T::lit(n as f64);
        let mut out = vec![T::zero(); self.padded_len(frames)];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); self.ifft.get_inplace_scratch_len()];
        for m in 0..frames {
            for k in 0..bins {
                let mut z = Complex::new(re[k * frames + m], im[k * frames + m]);
                if k == 0 || (n.is_multiple_of(2) && k == n / 2) {
                    z.im = T::zero();
                }
                buf[k] = z;
                if k > 0 && n - k >= bins {
                    buf[n - k] = z.conj();
                }
            }
            self.ifft.process_with_scratch(&mut buf, &mut scratch);
            let start = m * self.hop;
            for (i, b) in buf.iter().enumerate() {
                out[start + i] += self.window[i] * b.re * norm;
            }
        }
        let left = self.pad_left();
        Ok((0..len).map(|t| out[left + t] / env[left + t]).collect())
    }

    /// Transpose of [`StftPlan::synthesize`].
    pub fn synthesize_adjoint(
        &self,
        g: &[T],
        frames: usize,
        gre: &mut [T],
        gim: &mut [T],
    ) -> Result<()> {
        let len = g.len();
        let env = self.check_synth(frames, len)?;
        let bins = self.bins();
        let n = self.win;
        let left = self.pad_left();
        let mut gp = vec![T::zero(); self.padded_len(frames)];
        for t in 0..len {
            gp[left + t] = g[t] / env[left + t];
        }
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); self.fft.get_inplace_scratch_len()];
        let inv_n = T::one() / T::lit(n as f64);
        for m in 0..frames {
            let start = m * self.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(self.window[i] * gp[start + i], T::zero());
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..bins {
                let edge = k == 0 || (n.is_multiple_of(2) && k == n / 2);
                let c = if edge { inv_n } else { inv_n + inv_n };
                gre[k * frames + m] += c * buf[k].re;
                if !edge {
                    gim[k * frames + m] += c * buf[k].im;
                }
            }
        }
        Ok(())
    }
}

/// Complex spectrogram of a clip (`F×M` planes).
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpec {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub bins: usize,
    pub frames: usize,
    pub win: usize,
    pub hop: usize,
    /// Exponent of the power-law compression applied, if any.
    pub compressed: Option<f64>,
}

impl ComplexSpec {
    pub fn zeros(bins: usize, frames: usize, win: usize, hop: usize) -> Self {
        Self {
            re: vec![0.0; bins * frames],
            im: vec![0.0; bins * frames],
            bins,
            frames,
            win,
            hop,
            compressed: None,
        }
    }

    pub fn magnitude(&self, k: usize, m: usize) -> f64 {
        let i = k * self.frames + m;
        self.re[i].hypot(self.im[i])
    }
}

/// STFT of a clip, computed and stored in `f64`.
pub fn stft(samples: &[f32], win: usize, hop: usize) -> Result<ComplexSpec> {
    let plan = StftPlan::<f64>::cached(win, hop)?;
    let frames = plan.check_len(samples.len())?;
    let x: Vec<f64> = samples.iter().map(|&v| v as f64).collect();
    let mut spec = ComplexSpec::zeros(plan.bins(), frames, win, hop);
    plan.analyze(&x, &mut spec.re, &mut spec.im)?;
    Ok(spec)
}

/// Inverse STFT of an uncompressed spectrogram, producing `len` samples.
pub fn istft(spec: &ComplexSpec, len: usize) -> Result<Vec<f32>> {
    if spec.compressed.is_some() {
        return Err(Error::InvalidParam(
            "istft: spectrogram is power-law compressed; expand it first".into(),
        ));
    }
    let plan = StftPlan::<f64>::cached_cola(spec.win, spec.hop)?;
    if spec.bins != plan.bins() {
        return Err(Error::shape(
            "istft",
            format!("{} bins for window {}", spec.bins, spec.win),
        ));
    }
    Ok(plan
        .synthesize(&spec.re, &spec.im, spec.frames, len)?
        .into_iter()
        .map(|v| v as f32)
        .collect())
}

fn powerlaw(re: f64, im: f64, p: f64) -> (f64, f64) {
    let mag = re.hypot(im);
    if mag == 0.0 {
        return (0.0, 0.0);
    }
    let s = mag.powf(p - 1.0);
    (re * s, im * s)
}

/// Map every bin to magnitude `|z|^p`, keeping its phase.
pub fn powerlaw_compress(spec: &ComplexSpec, p: f64) -> Result<ComplexSpec> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidParam(format!(
            "power-law exponent must be in (0, 1], got {p}"
        )));
    }
    if spec.compressed.is_some() {
        return Err(Error::InvalidParam("spectrogram already compressed".into()));
    }
    let mut out = spec.clone();
    for (r, i) in out.re.iter_mut().zip(out.im.iter_mut()) {
        (*r, *i) = powerlaw(*r, *i, p);
    }
    out.compressed = Some(p);
    Ok(out)
}

pub fn powerlaw_expand(spec: &ComplexSpec) -> Result<ComplexSpec> {
    let p = spec.compressed.ok_or_else(|| {
        Error::InvalidParam("powerlaw_expand: spectrogram is not compressed".into())
    })?;
    let mut out = spec.clone();
    for (r, i) in out.re.iter_mut().zip(out.im.iter_mut()) {
        (*r, *i) = powerlaw(*r, *i, 1.0 / p);
    }
    out.compressed = None;
    Ok(out)
}
