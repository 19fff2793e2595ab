//! Spectrogram VAE: encoder, bottleneck, causal decoder and projection heads.
//!
//! Features are the power-law compressed STFT with real and imaginary parts
//! as two channels, Nyquist bin dropped (`F = win/2` rows) and frames padded
//! to a multiple of 8. Every encoder block halves frequency; three of them
//! halve time, so one latent frame spans 8 hops.

pub mod latent_file;
pub mod layers;
pub mod rf;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::stft::StftPlan;
use crate::dsp::AudioClip;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};
use layers::{BlockSpec, Builder, Conv, Linear, ResBlock, Snake, TimeMode};

/// Exponent of the power-law compression.
pub const COMPRESS: f64 = 0.3;
/// Inside the root of the differentiable power law, `(|z|² + ε)^…`.
pub const POWER_EPS: f64 = 1e-10;
pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 10.0;
pub const TIME_FACTOR: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub sample_rate: u32,
    /// Encoder output channels per block (8 entries).
    pub channels: Vec<usize>,
    pub latent_dim: usize,
    pub freq_kernel: usize,
    pub enc_time_kernel: usize,
    pub dec_time_kernel: usize,
    /// Time dilation of each encoder block's depthwise conv.
    pub enc_dilations: Vec<usize>,
    /// 0-based encoder blocks that halve time.
    pub time_down_blocks: Vec<usize>,
    pub teacher_dim: usize,
}

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = |name: &str, channels: Vec<usize>, d: usize| Self {
            name: name.into(),
            sample_rate: 16000,
            channels,
            latent_dim: d,
            freq_kernel: 3,
            enc_time_kernel: 5,
            dec_time_kernel: 2,
            enc_dilations: vec![1, 2, 4, 8, 4, 4, 2, 4],
            time_down_blocks: vec![3, 4, 5],
            teacher_dim: 1024,
        };
        let small = vec![64, 128, 128, 256, 256, 512, 512, 512];
        let large = vec![64, 128, 256, 512, 512, 1024, 1024, 2048];
        Ok(match name {
            "tiny" => base("tiny", vec![8, 8, 16, 16, 16, 32, 32, 32], 16),
            "small64" => base("small64", small, 64),
            "small128" => base("small128", small, 128),
            "large128" => base("large128", large, 128),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?} (tiny, small64, small128, large128)"
                )))
            }
        })
    }

    pub fn presets() -> [&'static str; 4] {
        ["tiny", "small64", "small128", "large128"]
    }

    /// STFT window: `round(0.032·sr)`.
    pub fn win(&self) -> usize {
        (0.032 * self.sample_rate as f64).round() as usize
    }

    /// STFT hop: `round(0.016·sr)`.
    pub fn hop(&self) -> usize {
        (0.016 * self.sample_rate as f64).round() as usize
    }

    /// Frequency rows fed to the encoder (Nyquist dropped).
    pub fn freq_bins(&self) -> usize {
        self.win() / 2
    }

    pub fn contrastive_dim(&self) -> usize {
        4 * self.latent_dim
    }

    /// Seconds per latent frame.
    pub fn latent_stride(&self) -> f64 {
        (TIME_FACTOR * self.hop()) as f64 / self.sample_rate as f64
    }

    /// STFT frames for `len` samples.
    pub fn stft_frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop())
    }

    /// Latent frames for `len` samples: `ceil(ceil(len/hop)/8)`.
    pub fn latent_frames(&self, len: usize) -> usize {
        self.stft_frames(len).div_ceil(TIME_FACTOR)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model {}: {m}", self.name)));
        if self.channels.len() != 8 || self.enc_dilations.len() != 8 {
            return bad("channels and enc_dilations need 8 entries".into());
        }
        let mut down = self.time_down_blocks.clone();
        down.sort_unstable();
        down.dedup();
        if down.len() != 3 || down.iter().any(|&b| b >= 8) {
            return bad(format!(
                "exactly 3 distinct time-downsampling blocks in 0..8 required, got {:?}",
                self.time_down_blocks
            ));
        }
        if self.freq_bins() != 1 << 8 {
            return bad(format!(
                "window {} gives {} bins; 8 halvings need 256",
                self.win(),
                self.freq_bins()
            ));
        }
        if self.freq_kernel.is_multiple_of(2) || self.enc_time_kernel.is_multiple_of(2) {
            return bad("encoder kernels must be odd".into());
        }
        if self.dec_time_kernel == 0 || self.latent_dim == 0 || self.channels.contains(&0) {
            return bad("sizes must be positive".into());
        }
        if self.enc_dilations.contains(&0) {
            return bad("dilations must be positive".into());
        }
        Ok(())
    }

    fn block_specs(&self) -> (Vec<BlockSpec>, Vec<BlockSpec>) {
        let mut c = vec![2];
        c.extend(&self.channels);
        let enc = (0..8)
            .map(|i| BlockSpec {
                cin: c[i],
                cout: c[i + 1],
                hidden: 2 * c[i].max(c[i + 1]),
                kf: self.freq_kernel,
                kt: self.enc_time_kernel,
                dilation: self.enc_dilations[i],
                time: TimeMode::Centered {
                    down: self.time_down_blocks.contains(&i),
                },
                scale_freq: true,
            })
            .collect();
        let dec = (0..8)
            .map(|j| BlockSpec {
                cin: c[8 - j],
                cout: c[7 - j],
                hidden: 2 * c[8 - j].max(c[7 - j]),
                kf: self.freq_kernel,
                kt: self.dec_time_kernel,
                dilation: 1,
                time: TimeMode::Causal {
                    up: self.time_down_blocks.contains(&(7 - j)),
                },
                scale_freq: true,
            })
            .collect();
        (enc, dec)
    }
}

/// Parameter layout of the generator (encoder, bottleneck, decoder, heads).
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    encoder: Vec<ResBlock>,
    bottleneck: Conv,
    dec_in: Conv,
    decoder: Vec<ResBlock>,
    pc1: Linear,
    pc_act: Snake,
    pc2: Linear,
    pl: Linear,
}

/// Graph nodes produced by [`Model::encode`].
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    /// `N×D×1×M`
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
}

/// Posterior statistics of one clip, row-major `D×M`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub mu: Vec<f32>,
    pub logvar: Vec<f32>,
    pub z: Vec<f32>,
    pub dim: usize,
    pub frames: usize,
    /// Seconds per latent frame.
    pub stride: f64,
}

impl Model {
    /// Build the layout and a freshly initialised parameter store.
    pub fn new<T: Real>(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let (enc_specs, dec_specs) = cfg.block_specs();
        let encoder = enc_specs
            .iter()
            .enumerate()
            .map(|(i, s)| ResBlock::new(&mut b, &format!("enc.{i}"), *s))
            .collect();
        let top = *cfg.channels.last().expect("validated");
        let d = cfg.latent_dim;
        let bottleneck = Conv::pointwise(&mut b, "bottleneck", top, 2 * d);
        let dec_in = Conv::pointwise(&mut b, "dec_in", d, top);
        let decoder = dec_specs
            .iter()
            .enumerate()
            .map(|(j, s)| ResBlock::new(&mut b, &format!("dec.{j}"), *s))
            .collect();
        let pc1 = Linear::new(&mut b, "head_c.fc1", d, 4 * d);
        let pc_act = Snake::new(&mut b, "head_c.act", 4 * d);
        let pc2 = Linear::new(&mut b, "head_c.fc2", 4 * d, 4 * d);
        let pl = Linear::new(&mut b, "head_l.fc", d, cfg.teacher_dim);
        Ok((
            Self {
                cfg,
                encoder,
                bottleneck,
                dec_in,
                decoder,
                pc1,
                pc_act,
                pc2,
                pl,
            },
            store,
        ))
    }

    pub fn encoder_blocks(&self) -> &[ResBlock] {
        &self.encoder
    }

    /// Compressed spectral features `N×2×F×T₈` of an `N×L` waveform batch.
    pub fn features<T: Real>(&self, g: &mut Graph<T>, audio: Var) -> Result<Var> {
        let plan = StftPlan::cached(self.cfg.win(), self.cfg.hop())?;
        let spec = g.stft(audio, plan)?;
        let comp = g.power_law(spec, COMPRESS, POWER_EPS)?;
        let f = self.cfg.freq_bins();
        let trimmed = g.slice(comp, 2, 0, f)?;
        let s = g.shape(trimmed).to_vec();
        let t8 = s[3].div_ceil(TIME_FACTOR) * TIME_FACTOR;
        if t8 == s[3] {
            return Ok(trimmed);
        }
        let pad = g.constant(Tensor::zeros(vec![s[0], 2, f, t8 - s[3]]));
        g.concat(&[trimmed, pad], 3)
    }

    /// Encoder stack on features; returns μ, clamped log-variance and the
    /// sample `z = μ + e^{logσ²/2}·ε` (`z = μ` when `noise` is `None`).
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        pv: &[Var],
        feats: Var,
        noise: Option<Var>,
    ) -> Result<LatentVars> {
        let s = g.shape(feats).to_vec();
        if s.len() != 4 || s[1] != 2 || s[2] != self.cfg.freq_bins() {
            return Err(Error::shape(
                "encode",
                format!("features {s:?}, expected N×2×{}×T", self.cfg.freq_bins()),
            ));
        }
        if !s[3].is_multiple_of(TIME_FACTOR) {
            return Err(Error::shape(
                "encode",
                format!("{} frames is not a multiple of {TIME_FACTOR}", s[3]),
            ));
        }
        let mut h = feats;
        for b in &self.encoder {
            h = b.forward(g, pv, h)?;
        }
        let stats = self.bottleneck.forward(g, pv, h)?;
        let d = self.cfg.latent_dim;
        let mu = g.slice(stats, 1, 0, d)?;
        let lv = g.slice(stats, 1, d, 2 * d)?;
        let logvar = g.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
        let z = match noise {
            Some(eps) => {
                let half = g.scale(logvar, 0.5);
                let std = g.exp(half);
                let e = g.mul(std, eps)?;
                g.add(mu, e)?
            }
            None => mu,
        };
        Ok(LatentVars { mu, logvar, z })
    }

    /// Decoder on `N×D×1×M` latents → compressed spectrum `N×2×F×8M`.
    pub fn decode_spec<T: Real>(&self, g: &mut Graph<T>, pv: &[Var], z: Var) -> Result<Var> {
        let s = g.shape(z).to_vec();
        if s.len() != 4 || s[1] != self.cfg.latent_dim || s[2] != 1 {
            return Err(Error::shape(
                "decode",
                format!("latent {s:?}, expected N×{}×1×M", self.cfg.latent_dim),
            ));
        }
        let mut h = self.dec_in.forward(g, pv, z)?;
        for b in &self.decoder {
            h = b.forward(g, pv, h)?;
        }
        Ok(h)
    }

    /// Compressed spectrum → waveform of `len` samples per row.
    pub fn synthesize<T: Real>(&self, g: &mut Graph<T>, spec: Var, len: usize) -> Result<Var> {
        let s = g.shape(spec).to_vec();
        let nyq = g.constant(Tensor::zeros(vec![s[0], 2, 1, s[3]]));
        let full = g.concat(&[spec, nyq], 2)?;
        let lin = g.power_law(full, 1.0 / COMPRESS, POWER_EPS)?;
        let plan = StftPlan::cached_cola(self.cfg.win(), self.cfg.hop())?;
        g.istft(lin, plan, len)
    }

    /// Time-averaged latent `N×D`.
    fn pool<T: Real>(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        let s = g.shape(z).to_vec();
        if s.len() != 4 || s[3] == 0 {
            return Err(Error::shape("project", format!("latent {s:?} has no frames")));
        }
        let m = g.mean_axes(z, &[2, 3])?;
        g.reshape(m, &[s[0], s[1]])
    }

    /// Contrastive head `N×4D`.
    pub fn project_contrastive<T: Real>(&self, g: &mut Graph<T>, pv: &[Var], z: Var) -> Result<Var> {
        let p = self.pool(g, z)?;
        let h = self.pc1.forward(g, pv, p)?;
        let h = self.pc_act.forward(g, pv, h)?;
        self.pc2.forward(g, pv, h)
    }

    /// Teacher head: unit-norm `N×teacher_dim`.
    pub fn project_teacher<T: Real>(&self, g: &mut Graph<T>, pv: &[Var], z: Var) -> Result<Var> {
        let p = self.pool(g, z)?;
        let h = self.pl.forward(g, pv, p)?;
        g.normalize_rows(h, crate::tensor::COSINE_EPS)
    }

    /// Number of parameters per top-level group.
    pub fn param_breakdown<T: Real>(&self, store: &ParamStore<T>) -> Vec<(String, usize)> {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for (name, t) in store.iter() {
            let key = name.split('.').next().unwrap_or(name).to_string();
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, n)) => *n += t.len(),
                None => groups.push((key, t.len())),
            }
        }
        groups
    }

    // ----- inference helpers (f32) ---------------------------------------

    fn check_clip(&self, clip: &AudioClip) -> Result<()> {
        if clip.sample_rate != self.cfg.sample_rate {
            return Err(Error::Data(format!(
                "clip at {} Hz, model expects {} Hz",
                clip.sample_rate, self.cfg.sample_rate
            )));
        }
        if clip.len() <= self.cfg.win() {
            return Err(Error::Data(format!(
                "clip of {} samples is shorter than one STFT window ({})",
                clip.len(),
                self.cfg.win()
            )));
        }
        Ok(())
    }

    /// Encode a clip. With `rng`, `z` is sampled; otherwise `z = μ`.
    pub fn encode_clip<R: Rng>(
        &self,
        params: &ParamStore<f32>,
        clip: &AudioClip,
        rng: Option<&mut R>,
    ) -> Result<LatentCode> {
        self.check_clip(clip)?;
        let mut g = Graph::<f32>::new();
        let pv = g.params(params, false);
        let audio = g.constant(Tensor::new(vec![1, clip.len()], clip.samples.clone())?);
        let feats = self.features(&mut g, audio)?;
        let m = g.shape(feats)[3] / TIME_FACTOR;
        let d = self.cfg.latent_dim;
        let noise = rng.map(|r| g.constant(Tensor::randn(vec![1, d, 1, m], r)));
        let lat = self.encode(&mut g, &pv, feats, noise)?;
        Ok(LatentCode {
            mu: g.data(lat.mu).to_vec(),
            logvar: g.data(lat.logvar).to_vec(),
            z: g.data(lat.z).to_vec(),
            dim: d,
            frames: m,
            stride: self.cfg.latent_stride(),
        })
    }

    /// Decode a `D×M` latent. Without `len` the output has `8M·hop`
    /// samples.
    pub fn decode_latent(&self, params: &ParamStore<f32>, z: &[f32], frames: usize, len: Option<usize>) -> Result<AudioClip> {
        let d = self.cfg.latent_dim;
        if z.len() != d * frames || frames == 0 {
            return Err(Error::shape(
                "decode",
                format!("{} values for D={d}, M={frames}", z.len()),
            ));
        }
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("latent value {i}")));
        }
        let max_len = TIME_FACTOR * frames * self.cfg.hop();
        let len = len.unwrap_or(max_len);
        if len == 0 || len > max_len {
            return Err(Error::InvalidParam(format!(
                "requested {len} samples; {frames} latent frames give at most {max_len}"
            )));
        }
        let mut g = Graph::<f32>::new();
        let pv = g.params(params, false);
        let zt = g.constant(Tensor::new(vec![1, d, 1, frames], z.to_vec())?);
        let spec = self.decode_spec(&mut g, &pv, zt)?;
        let wav = self.synthesize(&mut g, spec, len)?;
        AudioClip::new(g.data(wav).to_vec(), self.cfg.sample_rate)
    }

    /// Deterministic encoding, `z = μ`.
    pub fn encode_mean(&self, params: &ParamStore<f32>, clip: &AudioClip) -> Result<LatentCode> {
        self.encode_clip::<ChaCha8Rng>(params, clip, None)
    }

    /// Decoded reconstruction of `clip` through μ.
    pub fn reconstruct(&self, params: &ParamStore<f32>, clip: &AudioClip) -> Result<AudioClip> {
        let code = self.encode_mean(params, clip)?;
        self.decode_latent(params, &code.mu, code.frames, Some(clip.len()))
    }

    /// Time-averaged μ, `D` values.
    pub fn pooled_mu(&self, params: &ParamStore<f32>, clip: &AudioClip) -> Result<Vec<f32>> {
        let c = self.encode_mean(params, clip)?;
        Ok((0..c.dim)
            .map(|k| c.mu[k * c.frames..(k + 1) * c.frames].iter().sum::<f32>() / c.frames as f32)
            .collect())
    }

    /// Both head outputs for one clip (inference, through μ).
    pub fn embed(&self, params: &ParamStore<f32>, clip: &AudioClip) -> Result<(Vec<f32>, Vec<f32>)> {
        let code = self.encode_mean(params, clip)?;
        let mut g = Graph::<f32>::new();
        let pv = g.params(params, false);
        let mu = g.constant(Tensor::new(vec![1, code.dim, 1, code.frames], code.mu)?);
        let pc = self.project_contrastive(&mut g, &pv, mu)?;
        let pl = self.project_teacher(&mut g, &pv, mu)?;
        Ok((g.data(pc).to_vec(), g.data(pl).to_vec()))
    }
}

/// Shared, immutable model for read-only inference across threads.
pub type SharedModel = Arc<(Model, ParamStore<f32>)>;

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_clip(len: usize, seed: u64) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioClip::new((0..len).map(|_| rng.gen_range(-0.3..0.3)).collect(), 16000).unwrap()
    }

    #[test]
    fn synthesis_inverts_features() {
        let (m, _) = Model::new::<f64>(ModelConfig::preset("tiny").unwrap(), 0).unwrap();
        let tone: Vec<f32> = (0..4000).map(|i| 0.5 * (0.3 * i as f32).sin()).collect();
        let clip = AudioClip::new(tone, 16000).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 4000], clip.samples.iter().map(|&v| v as f64).collect()).unwrap());
        let f = m.features(&mut g, x).unwrap();
        let y = m.synthesize(&mut g, f, 4000).unwrap();
        let errs: Vec<f64> = g
            .value(y)
            .data()
            .iter()
            .zip(&clip.samples)
            .map(|(a, &b)| (a - b as f64).abs())
            .collect();
        // the ε inside the power law is amplified where the window sum is small
        let max = |e: &[f64]| e.iter().copied().fold(0.0, f64::max);
        assert!(max(&errs[512..3488]) < 1e-5, "{}", max(&errs[512..3488]));
        assert!(max(&errs) < 1e-3, "{}", max(&errs));
    }

    #[test]
    fn directional_derivative_through_the_generator() {
        let (m, p) = Model::new::<f64>(ModelConfig::preset("tiny").unwrap(), 4).unwrap();
        let clip: Vec<f64> = noise_clip(2048, 5).samples.iter().map(|&v| v as f64).collect();
        let loss = |p: &ParamStore<f64>| -> (f64, Vec<Vec<f64>>) {
            let mut g = Graph::<f64>::new();
            let pv = g.params(p, true);
            let x = g.constant(Tensor::new(vec![1, 2048], clip.clone()).unwrap());
            let f = m.features(&mut g, x).unwrap();
            let lat = m.encode(&mut g, &pv, f, None).unwrap();
            let s = m.decode_spec(&mut g, &pv, lat.z).unwrap();
            let y = m.synthesize(&mut g, s, 2048).unwrap();
            let d = g.sub(y, x).unwrap();
            let q = g.square(d);
            let l = g.sum(q).unwrap();
            g.backward(l).unwrap();
            let v = g.scalar(l);
            (v, pv.iter().map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default()).collect())
        };
        let (_, grads) = loss(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dir: Vec<Vec<f64>> = p.iter().map(|(_, t)| (0..t.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let analytic: f64 = grads
            .iter()
            .zip(&dir)
            .map(|(g, d)| g.iter().chain(std::iter::repeat(&0.0)).zip(d).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let h = 1e-6;
        let shift = |sign: f64| {
            let mut q = p.clone();
            for (id, d) in q.ids().collect::<Vec<_>>().into_iter().zip(&dir) {
                for (v, dv) in q.get_mut(id).data_mut().iter_mut().zip(d) {
                    *v += sign * h * dv;
                }
            }
            loss(&q).0
        };
        let numeric = (shift(1.0) - shift(-1.0)) / (2.0 * h);
        assert!((analytic - numeric).abs() <= 1e-5 * numeric.abs().max(1e-3), "{analytic} vs {numeric}");
    }

    #[test]
    fn parameter_counts() {
        for (name, target) in [("small64", 6.8e6), ("large128", 53.6e6)] {
            let (_, p) = Model::new::<f32>(ModelConfig::preset(name).unwrap(), 0).unwrap();
            let n = p.numel() as f64;
            eprintln!("{name}: {n}");
            assert!((n / target - 1.0).abs() <= 0.2, "{name}: {n}");
        }
    }

    #[test]
    fn ten_seconds_gives_79_frames() {
        let cfg = ModelConfig::preset("tiny").unwrap();
        assert_eq!(cfg.latent_frames(160_000), 79);
        assert!((cfg.latent_stride() - 0.128).abs() < 1e-12);
        let (m, p) = Model::new::<f32>(cfg, 1).unwrap();
        let code = m.encode_clip::<ChaCha8Rng>(&p, &noise_clip(160_000, 2), None).unwrap();
        assert_eq!((code.dim, code.frames), (16, 79));
        assert_eq!(code.z, code.mu);
    }

    #[test]
    fn round_trip_shapes_and_determinism() {
        let (m, p) = Model::new::<f32>(ModelConfig::preset("tiny").unwrap(), 3).unwrap();
        let clip = noise_clip(16000, 4);
        let a = m.reconstruct(&p, &clip).unwrap();
        let b = m.reconstruct(&p, &clip).unwrap();
        assert_eq!(a.len(), clip.len());
        assert_eq!(a, b);
        let z = vec![0.1f32; 16];
        let out = m.decode_latent(&p, &z, 1, None).unwrap();
        assert_eq!(out.len(), 8 * 256);
    }

    #[test]
    fn decoder_is_causal() {
        let (m, p) = Model::new::<f32>(ModelConfig::preset("tiny").unwrap(), 5).unwrap();
        let d = 16;
        let frames = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = Tensor::<f32>::randn(vec![1, d, 1, frames], &mut rng);
        let spec = |z: Tensor<f32>| {
            let mut g = Graph::<f32>::new();
            let pv = g.params(&p, false);
            let zv = g.constant(z);
            let s = m.decode_spec(&mut g, &pv, zv).unwrap();
            g.value(s).clone()
        };
        let base = spec(z.clone());
        for changed in 0..frames {
            let mut z2 = z.clone();
            for k in 0..d {
                z2.data_mut()[k * frames + changed] += 1.0;
            }
            let out = spec(z2);
            let t = 8 * frames;
            for (row_a, row_b) in base.data().chunks(t).zip(out.data().chunks(t)) {
                assert_eq!(&row_a[..8 * changed], &row_b[..8 * changed]);
            }
            assert_ne!(base, out);
        }
    }

    #[test]
    fn heads_shapes_and_norm() {
        let (m, p) = Model::new::<f32>(ModelConfig::preset("tiny").unwrap(), 7).unwrap();
        let (pc, pl) = m.embed(&p, &noise_clip(8000, 8)).unwrap();
        assert_eq!(pc.len(), 64);
        assert_eq!(pl.len(), 1024);
        let n: f32 = pl.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn reparameterisation_passes_gradient_to_mean_and_log_variance() {
        let (m, p) = Model::new::<f64>(ModelConfig::preset("tiny").unwrap(), 9).unwrap();
        let mut g = Graph::<f64>::new();
        let pv = g.params(&p, false);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let feats = g.leaf(Tensor::randn(vec![1, 2, 256, 8], &mut rng), false);
        let eps = g.constant(Tensor::randn(vec![1, 16, 1, 1], &mut rng));
        let lat = m.encode(&mut g, &pv, feats, None).unwrap();
        // leaves standing in for the encoder outputs
        let mu = g.leaf(g.value(lat.mu).clone(), true);
        let lv = g.leaf(g.value(lat.logvar).clone(), true);
        let half = g.scale(lv, 0.5);
        let sd = g.exp(half);
        let e = g.mul(sd, eps).unwrap();
        let z = g.add(mu, e).unwrap();
        let sq = g.square(z);
        let l = g.sum(sq).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(mu).unwrap().iter().all(|v| *v != 0.0));
        assert!(g.grad(lv).unwrap().iter().all(|v| *v != 0.0));
    }

    #[test]
    fn extreme_inputs_keep_z_finite() {
        let (m, p) = Model::new::<f32>(ModelConfig::preset("tiny").unwrap(), 11).unwrap();
        let loud = AudioClip::new(vec![1e6; 4000], 16000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let code = m.encode_clip(&p, &loud, Some(&mut rng)).unwrap();
        assert!(code.z.iter().all(|v| v.is_finite()));
        assert!(code.logvar.iter().all(|v| (LOGVAR_MIN as f32..=LOGVAR_MAX as f32).contains(v)));
        assert!(m.encode_clip::<ChaCha8Rng>(&p, &noise_clip(100, 1), None).is_err());
    }

    #[test]
    fn constant_latent_pools_like_a_single_frame() {
        let (m, p) = Model::new::<f32>(ModelConfig::preset("tiny").unwrap(), 13).unwrap();
        let col: Vec<f32> = (0..16).map(|k| 0.1 * k as f32 - 0.5).collect();
        let run = |frames: usize| {
            let data: Vec<f32> = col.iter().flat_map(|&v| std::iter::repeat_n(v, frames)).collect();
            let mut g = Graph::<f32>::new();
            let pv = g.params(&p, false);
            let z = g.constant(Tensor::new(vec![1, 16, 1, frames], data).unwrap());
            let a = m.project_contrastive(&mut g, &pv, z).unwrap();
            let b = m.project_teacher(&mut g, &pv, z).unwrap();
            (g.value(a).data().to_vec(), g.value(b).data().to_vec())
        };
        let (a1, b1) = run(1);
        let (a5, b5) = run(5);
        for (x, y) in a1.iter().zip(&a5).chain(b1.iter().zip(&b5)) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
        }
        let mut g = Graph::<f32>::new();
        let pv = g.params(&p, false);
        let empty = g.constant(Tensor::zeros(vec![1, 16, 1, 0]));
        assert!(m.project_teacher(&mut g, &pv, empty).is_err());
    }

    #[test]
    fn encoder_collapses_frequency_and_every_preset_round_trips() {
        for name in ModelConfig::presets() {
            let (m, p) = Model::new::<f32>(ModelConfig::preset(name).unwrap(), 14).unwrap();
            let clip = noise_clip(16000, 15);
            let mut g = Graph::<f32>::new();
            let pv = g.params(&p, false);
            let x = g.constant(Tensor::new(vec![1, 16000], clip.samples.clone()).unwrap());
            let f = m.features(&mut g, x).unwrap();
            let lat = m.encode(&mut g, &pv, f, None).unwrap();
            assert_eq!(g.shape(lat.mu), &[1, m.cfg.latent_dim, 1, m.cfg.latent_frames(16000)][..]);
            let s = m.decode_spec(&mut g, &pv, lat.mu).unwrap();
            assert_eq!(g.shape(s)[3], 8 * m.cfg.latent_frames(16000));
            let y = m.synthesize(&mut g, s, 16000).unwrap();
            assert_eq!(g.shape(y), &[1, 16000][..], "{name}");
        }
    }
}
