//! Deterministic effect primitives used by augmentation.
//!
//! Every effect returns a clip of the input's length and sample rate, and
//! rejects parameters outside its documented range.
//!
//! | effect          | parameter ranges                                   |
//! |-----------------|----------------------------------------------------|
//! | `gain`          | −60 ≤ dB ≤ 40                                      |
//! | `apply_eq`      | 1..=32 bands, each −24 ≤ dB ≤ 24                   |
//! | `apply_reverb`  | FIR of 1..=4·sr taps, finite                       |
//! | `level_jump`    | time ≤ len, −40 ≤ dB ≤ 20                          |
//! | `time_shift`    | \|k\| ≤ len                                        |
//! | `pitch_shift`   | −12 ≤ semitones ≤ 12                               |
//! | `bandpass`      | 0 ≤ lo < hi ≤ sr/2                                 |
//! | `spectral_mask` | bin range inside the spectrogram                   |
//! | `distort`       | 0 < drive ≤ 50                                     |
//! | `codec_sim`     | 2 ≤ bits ≤ 24, 0 < cutoff ≤ sr/2                   |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::stft::{ComplexSpec, StftPlan};
use super::AudioClip;
use crate::error::{Error, Result};

fn check(ok: bool, what: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParam(what()))
    }
}

fn db_to_amp(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

/// Full-length FFT of a real signal.
fn rfft_full(x: &[f32], n: usize) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|i| Complex::new(x.get(i).copied().unwrap_or(0.0) as f64, 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf
}

/// Inverse of [`rfft_full`], keeping the first `len` real samples.
fn irfft_full(mut buf: Vec<Complex<f64>>, len: usize) -> Vec<f32> {
    let n = buf.len();
    FftPlanner::new().plan_fft_inverse(n).process(&mut buf);
    buf.iter().take(len).map(|c| (c.re / n as f64) as f32).collect()
}

/// Multiply the spectrum by a real, symmetric response `h(f_hz)`.
fn filter_response(clip: &AudioClip, h: impl Fn(f64) -> f64) -> AudioClip {
    let n = clip.len();
    if n == 0 {
        return clip.clone();
    }
    let mut spec = rfft_full(&clip.samples, n);
    let sr = clip.sample_rate as f64;
    for (k, z) in spec.iter_mut().enumerate() {
        let kk = k.min(n - k);
        *z *= h(kk as f64 * sr / n as f64);
    }
    clip.with_samples(irfft_full(spec, n))
}

pub fn gain(clip: &AudioClip, db: f64) -> Result<AudioClip> {
    check((-60.0..=40.0).contains(&db), || format!("gain {db} dB outside [-60, 40]"))?;
    if db == 0.0 {
        return Ok(clip.clone());
    }
    let a = db_to_amp(db) as f32;
    Ok(clip.with_samples(clip.samples.iter().map(|&x| x * a).collect()))
}

/// Scale to a target RMS level in dBFS; silence is returned unchanged.
pub fn normalize_rms(clip: &AudioClip, target_db: f64) -> Result<AudioClip> {
    check((-80.0..=0.0).contains(&target_db), || {
        format!("loudness target {target_db} dBFS outside [-80, 0]")
    })?;
    let cur = super::rms_db(&clip.samples);
    if !cur.is_finite() {
        return Ok(clip.clone());
    }
    let a = db_to_amp(target_db - cur) as f32;
    Ok(clip.with_samples(clip.samples.iter().map(|&x| x * a).collect()))
}

/// Graphic EQ: band `i` of `n` covers an equal share of log-frequency
/// between 50 Hz and Nyquist; gains are interpolated in dB between band
/// centres.
pub fn apply_eq(clip: &AudioClip, band_gains_db: &[f64]) -> Result<AudioClip> {
    let nb = band_gains_db.len();
    check((1..=32).contains(&nb), || format!("EQ needs 1..=32 bands, got {nb}"))?;
    check(
        band_gains_db.iter().all(|g| (-24.0..=24.0).contains(g)),
        || format!("EQ gains {band_gains_db:?} outside [-24, 24] dB"),
    )?;
    if band_gains_db.iter().all(|&g| g == 0.0) {
        return Ok(clip.clone());
    }
    let lo = 50f64.ln();
    let hi = (clip.sample_rate as f64 / 2.0).max(51.0).ln();
    let width = (hi - lo) / nb as f64;
    let centres: Vec<f64> = (0..nb).map(|i| lo + (i as f64 + 0.5) * width).collect();
    let gains = band_gains_db.to_vec();
    Ok(filter_response(clip, move |f| {
        let lf = f.max(1.0).ln();
        let db = if lf <= centres[0] {
            gains[0]
        } else if lf >= centres[nb - 1] {
            gains[nb - 1]
        } else {
            let pos = (lf - centres[0]) / width;
            let i = (pos.floor() as usize).min(nb - 2);
            let t = pos - i as f64;
            gains[i] * (1.0 - t) + gains[i + 1] * t
        };
        db_to_amp(db)
    }))
}

/// Exponentially decaying noise impulse response with a unit direct path.
pub fn decay_ir(sample_rate: u32, rt60: f64, wet: f64, seed: u64) -> Result<Vec<f32>> {
    check((0.05..=3.0).contains(&rt60), || format!("rt60 {rt60} s outside [0.05, 3]"))?;
    check((0.0..=1.0).contains(&wet), || format!("wet level {wet} outside [0, 1]"))?;
    let sr = sample_rate as f64;
    let len = ((rt60 * sr) as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let decay = -6.907_755_278_982_137 / (rt60 * sr); // ln(1e-3) per sample
    let mut ir: Vec<f32> = (0..len)
        .map(|i| (rng.gen_range(-1.0..1.0) * (decay * i as f64).exp()) as f32)
        .collect();
    let e = ir.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    let s = if e > 0.0 { wet / e } else { 0.0 };
    ir.iter_mut().for_each(|v| *v = (*v as f64 * s) as f32);
    ir[0] += 1.0;
    Ok(ir)
}

/// Linear convolution with `fir`, truncated to the input length.
pub fn apply_reverb(clip: &AudioClip, fir: &[f32]) -> Result<AudioClip> {
    let max = 4 * clip.sample_rate as usize;
    check(!fir.is_empty() && fir.len() <= max, || {
        format!("reverb FIR length {} outside [1, {max}]", fir.len())
    })?;
    check(fir.iter().all(|v| v.is_finite()), || "reverb FIR not finite".into())?;
    let n = clip.len();
    if n == 0 {
        return Ok(clip.clone());
    }
    let size = (n + fir.len() - 1).next_power_of_two();
    let a = rfft_full(&clip.samples, size);
    let b = rfft_full(fir, size);
    let prod = a.iter().zip(&b).map(|(x, y)| x * y).collect();
    Ok(clip.with_samples(irfft_full(prod, n)))
}

/// Change the level from sample `at` onwards.
pub fn level_jump(clip: &AudioClip, at: usize, db: f64) -> Result<AudioClip> {
    check(at <= clip.len(), || format!("level jump at {at} beyond {} samples", clip.len()))?;
    check((-40.0..=20.0).contains(&db), || format!("level jump {db} dB outside [-40, 20]"))?;
    let a = db_to_amp(db) as f32;
    let mut s = clip.samples.clone();
    s[at..].iter_mut().for_each(|x| *x *= a);
    Ok(clip.with_samples(s))
}

/// Delay by `k` samples (advance if negative); circular or zero-filled.
pub fn time_shift(clip: &AudioClip, k: i64, circular: bool) -> Result<AudioClip> {
    let n = clip.len() as i64;
    check(k.abs() <= n, || format!("time shift {k} beyond {n} samples"))?;
    let mut out = vec![0.0; clip.len()];
    for (i, &x) in clip.samples.iter().enumerate() {
        let j = i as i64 + k;
        if circular {
            out[j.rem_euclid(n.max(1)) as usize] = x;
        } else if (0..n).contains(&j) {
            out[j as usize] = x;
        }
    }
    Ok(clip.with_samples(out))
}

/// Ideal band-pass between `lo_hz` and `hi_hz` (applied over the whole clip).
pub fn bandpass(clip: &AudioClip, lo_hz: f64, hi_hz: f64) -> Result<AudioClip> {
    let ny = clip.sample_rate as f64 / 2.0;
    check(0.0 <= lo_hz && lo_hz < hi_hz && hi_hz <= ny, || {
        format!("bandpass [{lo_hz}, {hi_hz}] Hz invalid for Nyquist {ny}")
    })?;
    Ok(filter_response(clip, |f| {
        if f >= lo_hz && f <= hi_hz {
            1.0
        } else {
            0.0
        }
    }))
}

/// Zero frequency rows `lo_bin..hi_bin` of a spectrogram.
pub fn spectral_mask(spec: &ComplexSpec, lo_bin: usize, hi_bin: usize) -> Result<ComplexSpec> {
    check(lo_bin < hi_bin && hi_bin <= spec.bins, || {
        format!("mask bins {lo_bin}..{hi_bin} outside 0..{}", spec.bins)
    })?;
    let mut out = spec.clone();
    let f = spec.frames;
    out.re[lo_bin * f..hi_bin * f].iter_mut().for_each(|v| *v = 0.0);
    out.im[lo_bin * f..hi_bin * f].iter_mut().for_each(|v| *v = 0.0);
    Ok(out)
}

/// Time-domain wrapper around [`spectral_mask`] using a 512/128 STFT scaled
/// to the sample rate; `lo`/`hi` are fractions of Nyquist.
pub fn spectral_mask_clip(clip: &AudioClip, lo: f64, hi: f64) -> Result<AudioClip> {
    check(0.0 <= lo && lo < hi && hi <= 1.0, || {
        format!("mask band [{lo}, {hi}] outside [0, 1]")
    })?;
    let win = 512;
    let hop = 128;
    if clip.len() <= win {
        return Ok(clip.clone());
    }
    let spec = super::stft(&clip.samples, win, hop)?;
    let lo_bin = (lo * (spec.bins - 1) as f64).floor() as usize;
    let hi_bin = ((hi * (spec.bins - 1) as f64).ceil() as usize).clamp(lo_bin + 1, spec.bins);
    let masked = spectral_mask(&spec, lo_bin, hi_bin)?;
    Ok(clip.with_samples(super::istft(&masked, clip.len())?))
}

/// `tanh(drive·x) / tanh(drive)`.
pub fn distort(clip: &AudioClip, drive: f64) -> Result<AudioClip> {
    check(drive > 0.0 && drive <= 50.0, || format!("drive {drive} outside (0, 50]"))?;
    let norm = drive.tanh();
    Ok(clip.with_samples(
        clip.samples
            .iter()
            .map(|&x| ((drive * x as f64).tanh() / norm) as f32)
            .collect(),
    ))
}

/// Crude codec stand-in: low-pass at `cutoff_hz`, then uniform quantisation
/// to `bits` bits over [−1, 1].
pub fn codec_sim(clip: &AudioClip, bits: u32, cutoff_hz: f64) -> Result<AudioClip> {
    check((2..=24).contains(&bits), || format!("bit depth {bits} outside [2, 24]"))?;
    let ny = clip.sample_rate as f64 / 2.0;
    check(cutoff_hz > 0.0 && cutoff_hz <= ny, || {
        format!("codec cutoff {cutoff_hz} Hz outside (0, {ny}]")
    })?;
    let lp = bandpass(clip, 0.0, cutoff_hz)?;
    let q = (1u32 << (bits - 1)) as f32;
    Ok(lp.with_samples(
        lp.samples
            .iter()
            .map(|&x| (x.clamp(-1.0, 1.0) * q).round() / q)
            .collect(),
    ))
}

/// Phase-vocoder time stretch by `rate` (>1 lengthens), librosa style.
fn stretch(x: &[f32], rate: f64, win: usize, hop: usize) -> Result<Vec<f32>> {
    let plan = StftPlan::<f64>::cached_cola(win, hop)?;
    let xd: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let bins = plan.bins();
    let frames = plan.frames(xd.len());
    let (mut re, mut im) = (vec![0.0; bins * frames], vec![0.0; bins * frames]);
    plan.analyze(&xd, &mut re, &mut im)?;
    let out_len = ((x.len() as f64) * rate).round() as usize;
    let out_frames = plan.frames(out_len.max(1));
    let (mut ore, mut oim) = (vec![0.0; bins * out_frames], vec![0.0; bins * out_frames]);
    let mut phase: Vec<f64> = (0..bins).map(|k| im[k * frames].atan2(re[k * frames])).collect();
    let two_pi = 2.0 * std::f64::consts::PI;
    for j in 0..out_frames {
        let t = j as f64 / rate;
        let t0 = (t.floor() as usize).min(frames - 1);
        let t1 = (t0 + 1).min(frames - 1);
        let a = t - t0 as f64;
        for k in 0..bins {
            let (i0, i1) = (k * frames + t0, k * frames + t1);
            let m0 = re[i0].hypot(im[i0]);
            let m1 = re[i1].hypot(im[i1]);
            let mag = (1.0 - a.min(1.0)) * m0 + a.min(1.0) * m1;
            ore[k * out_frames + j] = mag * phase[k].cos();
            oim[k * out_frames + j] = mag * phase[k].sin();
            let adv = two_pi * (k * hop) as f64 / win as f64;
            let mut d = im[i1].atan2(re[i1]) - im[i0].atan2(re[i0]) - adv;
            d -= two_pi * (d / two_pi).round();
            phase[k] += adv + d;
        }
    }
    let y = plan.synthesize(&ore, &oim, out_frames, out_len.max(1))?;
    Ok(y.into_iter().map(|v| v as f32).collect())
}

/// Phase-vocoder frame length of [`pitch_shift`].
pub const PITCH_WIN: usize = 1024;

/// Shift pitch by `semitones` keeping duration: stretch by `r = 2^(s/12)`,
/// then resample by `r` (linear interpolation) and crop/zero-pad.
pub fn pitch_shift(clip: &AudioClip, semitones: f64) -> Result<AudioClip> {
    check((-12.0..=12.0).contains(&semitones), || {
        format!("pitch shift {semitones} semitones outside [-12, 12]")
    })?;
    if semitones == 0.0 {
        return Ok(clip.clone());
    }
    let (win, hop) = (PITCH_WIN, PITCH_WIN / 4);
    if clip.len() <= win {
        return Err(Error::InvalidParam(format!(
            "pitch shift needs more than {win} samples, got {}",
            clip.len()
        )));
    }
    let r = 2f64.powf(semitones / 12.0);
    let y = stretch(&clip.samples, r, win, hop)?;
    let out = (0..clip.len())
        .map(|i| {
            let p = i as f64 * r;
            let i0 = p.floor() as usize;
            let a = (p - i0 as f64) as f32;
            match (y.get(i0), y.get(i0 + 1)) {
                (Some(&u), Some(&v)) => u * (1.0 - a) + v * a,
                (Some(&u), None) => u * (1.0 - a),
                _ => 0.0,
            }
        })
        .collect();
    Ok(clip.with_samples(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(n: usize, seed: u64) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioClip::new((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(), 16000).unwrap()
    }

    fn sine(freq: f64, n: usize) -> AudioClip {
        AudioClip::new(
            (0..n)
                .map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin()) as f32)
                .collect(),
            16000,
        )
        .unwrap()
    }

    /// Band energy by direct summation of the power spectrum.
    fn band_energy(x: &[f32], sr: f64, lo: f64, hi: f64) -> f64 {
        let n = x.len();
        let spec = rfft_full(x, n);
        spec.iter()
            .enumerate()
            .filter(|(k, _)| {
                let f = (*k).min(n - *k) as f64 * sr / n as f64;
                f >= lo && f <= hi
            })
            .map(|(_, z)| z.norm_sqr())
            .sum()
    }

    fn peak_freq(x: &[f32], sr: f64) -> f64 {
        let n = x.len();
        let spec = rfft_full(x, n);
        let k = (1..n / 2)
            .max_by(|&a, &b| spec[a].norm().total_cmp(&spec[b].norm()))
            .unwrap();
        k as f64 * sr / n as f64
    }

    #[test]
    fn zero_gain_is_bit_exact() {
        let c = noise(1000, 1);
        assert_eq!(gain(&c, 0.0).unwrap(), c);
        assert!(gain(&c, 100.0).is_err());
    }

    #[test]
    fn circular_shift_inverts() {
        let c = noise(777, 2);
        for k in [0, 1, 13, 776, -5] {
            let s = time_shift(&c, k, true).unwrap();
            assert_eq!(time_shift(&s, -k, true).unwrap(), c);
        }
        let z = time_shift(&c, 3, false).unwrap();
        assert_eq!(&z.samples[..3], &[0.0; 3]);
        assert_eq!(z.samples[3], c.samples[0]);
    }

    #[test]
    fn bandpass_rejects_out_of_band() {
        let c = noise(16000, 3);
        let ny = 8000.0;
        let (lo, hi) = (0.1 * ny, 0.3 * ny);
        let y = bandpass(&c, lo, hi).unwrap();
        let inb = band_energy(&y.samples, 16000.0, lo, hi);
        let outb = band_energy(&y.samples, 16000.0, 0.0, lo * 0.98) + band_energy(&y.samples, 16000.0, hi * 1.02, ny);
        assert!(10.0 * (inb / outb.max(1e-30)).log10() >= 30.0);
        assert!(bandpass(&c, 3000.0, 2000.0).is_err());
    }

    #[test]
    fn pitch_shift_moves_sinusoid() {
        let c = sine(440.0, 16000);
        for s in [-5.0, 3.0, 7.0] {
            let y = pitch_shift(&c, s).unwrap();
            assert_eq!(y.len(), c.len());
            let want = 440.0 * 2f64.powf(s / 12.0);
            let got = peak_freq(&y.samples[2000..14000], 16000.0);
            assert!((got - want).abs() / want < 0.03, "{s}: {got} vs {want}");
        }
        assert_eq!(pitch_shift(&c, 0.0).unwrap(), c);
        assert!(pitch_shift(&c, 13.0).is_err());
    }

    #[test]
    fn reverb_identity_and_length() {
        let c = noise(2000, 4);
        assert_eq!(apply_reverb(&c, &[1.0]).unwrap().samples.iter().zip(&c.samples).filter(|(a, b)| (*a - *b).abs() > 1e-6).count(), 0);
        let ir = decay_ir(16000, 0.3, 0.5, 9).unwrap();
        let y = apply_reverb(&c, &ir).unwrap();
        assert_eq!(y.len(), c.len());
        assert_eq!(decay_ir(16000, 0.3, 0.5, 9).unwrap(), ir);
    }

    #[test]
    fn eq_flat_is_identity_and_boost_raises_band() {
        let c = noise(8000, 5);
        assert_eq!(apply_eq(&c, &[0.0; 4]).unwrap(), c);
        let y = apply_eq(&c, &[12.0, 0.0, 0.0, 0.0]).unwrap();
        let before = band_energy(&c.samples, 16000.0, 50.0, 120.0);
        let after = band_energy(&y.samples, 16000.0, 50.0, 120.0);
        assert!(after > 4.0 * before);
        assert!(apply_eq(&c, &[30.0]).is_err());
    }

    #[test]
    fn distort_codec_jump_mask() {
        let c = noise(4000, 6);
        let d = distort(&c, 5.0).unwrap();
        assert!(d.samples.iter().all(|v| v.abs() <= 1.0));
        let q = codec_sim(&c, 4, 4000.0).unwrap();
        assert!(q.samples.iter().all(|v| (v * 8.0 - (v * 8.0).round()).abs() < 1e-5));
        let j = level_jump(&c, 100, -6.0).unwrap();
        assert_eq!(&j.samples[..100], &c.samples[..100]);
        let m = spectral_mask_clip(&c, 0.2, 0.4).unwrap();
        assert_eq!(m.len(), c.len());
        assert!(distort(&c, 0.0).is_err());
        assert!(codec_sim(&c, 1, 4000.0).is_err());
        assert!(level_jump(&c, 5000, 0.0).is_err());
    }
}
