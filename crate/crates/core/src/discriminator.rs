//! Multi-resolution, multi-band spectrogram discriminators.
//!
//! For each STFT resolution the compressed complex spectrum (real and
//! imaginary parts as two channels) feeds one full-band network and one
//! network per frequency band. Each network is six 3×3 conv layers with
//! leaky ReLU, then a 1×1 conv to a single-channel logit map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::stft::StftPlan;
use crate::error::{Error, Result};
use crate::model::layers::{Builder, Conv};
use crate::model::{COMPRESS, POWER_EPS};
use crate::tensor::{Conv2dCfg, Graph, ParamStore, Real, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscConfig {
    /// STFT windows; hop is half the window.
    pub windows: Vec<usize>,
    /// Band edges as fractions of the bin count, ascending from 0 to 1.
    pub band_edges: Vec<f64>,
    pub channels: usize,
    pub layers: usize,
    pub slope: f64,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            windows: vec![1024, 256, 128],
            band_edges: vec![0.0, 0.1, 0.25, 0.5, 0.75, 1.0],
            channels: 32,
            layers: 6,
            slope: 0.2,
        }
    }
}

impl DiscConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.band_edges;
        let edges_ok = e.len() >= 2
            && e[0] == 0.0
            && e[e.len() - 1] == 1.0
            && e.windows(2).all(|w| w[0] < w[1]);
        if !edges_ok {
            return Err(Error::Config(format!("band edges {e:?} must rise from 0 to 1")));
        }
        if self.windows.is_empty() || self.windows.iter().any(|&w| w < 4) {
            return Err(Error::Config(format!("bad discriminator windows {:?}", self.windows)));
        }
        if self.channels == 0 || self.layers == 0 {
            return Err(Error::Config("discriminator needs channels and layers".into()));
        }
        Ok(())
    }

    /// Number of networks: one full band plus one per band, per resolution.
    pub fn count(&self) -> usize {
        self.windows.len() * self.band_edges.len()
    }
}

/// Frequency rows `[floor(lo·F), floor(hi·F))` of each band for `bins = F`.
pub fn band_rows(edges: &[f64], bins: usize) -> Vec<(usize, usize)> {
    edges
        .windows(2)
        .map(|w| {
            let lo = (w[0] * bins as f64).floor() as usize;
            let hi = (w[1] * bins as f64).floor() as usize;
            (lo.min(bins), hi.min(bins))
        })
        .collect()
}

/// Stride along one axis: 2 unless the axis has fewer than 3 entries.
pub fn clamped_stride(size: usize) -> usize {
    if size < 3 {
        1
    } else {
        2
    }
}

/// Output size of a 3-tap, pad-1 conv with the clamped stride.
pub fn layer_out(size: usize) -> usize {
    Conv2dCfg::out_len(size, 2, 3, 1, clamped_stride(size)).unwrap_or(0)
}

#[derive(Clone, Debug)]
pub struct SpecDisc {
    pub window: usize,
    /// `None` is the full band.
    pub band: Option<usize>,
    convs: Vec<Conv>,
    head: Conv,
}

/// One network's output.
#[derive(Clone, Debug)]
pub struct DiscOut {
    /// `N×1×H×W`
    pub logits: Var,
    pub features: Vec<Var>,
}

impl SpecDisc {
    fn new<T: Real>(b: &mut Builder<'_, T, ChaCha8Rng>, name: &str, cfg: &DiscConfig, window: usize, band: Option<usize>) -> Self {
        let convs = (0..cfg.layers)
            .map(|i| {
                let cin = if i == 0 { 2 } else { cfg.channels };
                Conv::new(b, &format!("{name}.l{i}"), cin, cfg.channels, (3, 3), 1, true, Conv2dCfg::default())
            })
            .collect();
        let head = Conv::pointwise(b, &format!("{name}.head"), cfg.channels, 1);
        Self {
            window,
            band,
            convs,
            head,
        }
    }

    /// Run on a `N×2×H×W` spectrogram slice.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, pv: &[Var], x: Var, slope: f64) -> Result<DiscOut> {
        let mut h = x;
        let mut features = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            let s = g.shape(h).to_vec();
            let cfg = Conv2dCfg::default()
                .stride(clamped_stride(s[2]), clamped_stride(s[3]))
                .pad(1, 1, 1, 1);
            let y = g.conv2d(h, pv[c.w.0], c.b.map(|b| pv[b.0]), cfg)?;
            h = g.leaky_relu(y, slope);
            features.push(h);
        }
        let logits = self.head.forward(g, pv, h)?;
        Ok(DiscOut { logits, features })
    }
}

/// All spectrogram discriminators, parameters kept in their own store.
#[derive(Clone, Debug)]
pub struct DiscBank {
    pub cfg: DiscConfig,
    pub discs: Vec<SpecDisc>,
}

impl DiscBank {
    pub fn new<T: Real>(cfg: DiscConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let mut discs = Vec::with_capacity(cfg.count());
        for &w in &cfg.windows {
            discs.push(SpecDisc::new(&mut b, &format!("w{w}.full"), &cfg, w, None));
            for k in 0..cfg.band_edges.len() - 1 {
                discs.push(SpecDisc::new(&mut b, &format!("w{w}.band{k}"), &cfg, w, Some(k)));
            }
        }
        Ok((Self { cfg, discs }, store))
    }

    pub fn len(&self) -> usize {
        self.discs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.discs.is_empty()
    }

    pub fn min_len(&self) -> usize {
        self.cfg.windows.iter().copied().max().unwrap_or(0)
    }

    /// Compressed spectrum `N×2×F×M` of a waveform batch at one window.
    pub fn spectrum<T: Real>(g: &mut Graph<T>, audio: Var, window: usize) -> Result<Var> {
        let plan = StftPlan::cached(window, window / 2)?;
        let spec = g.stft(audio, plan)?;
        g.power_law(spec, COMPRESS, POWER_EPS)
    }

    /// Every network's logits and features for an `N×L` waveform batch.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, pv: &[Var], audio: Var) -> Result<Vec<DiscOut>> {
        let len = g.shape(audio).last().copied().unwrap_or(0);
        if len <= self.min_len() {
            return Err(Error::Data(format!(
                "discriminator input of {len} samples is not longer than the largest window ({})",
                self.min_len()
            )));
        }
        let mut out = Vec::with_capacity(self.discs.len());
        for &w in &self.cfg.windows {
            let spec = Self::spectrum(g, audio, w)?;
            let bins = g.shape(spec)[2];
            let rows = band_rows(&self.cfg.band_edges, bins);
            for d in self.discs.iter().filter(|d| d.window == w) {
                let x = match d.band {
                    None => spec,
                    Some(k) if rows[k].0 < rows[k].1 => g.slice(spec, 2, rows[k].0, rows[k].1)?,
                    Some(k) => {
                        return Err(Error::Data(format!("band {k} at window {w} has no frequency rows")))
                    }
                };
                out.push(d.forward(g, pv, x, self.cfg.slope)?);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn eighteen_networks_with_stable_size() {
        let (bank, store) = DiscBank::new::<f32>(DiscConfig::default(), 0).unwrap();
        assert_eq!(bank.len(), 18);
        let per = (32 * 2 * 9 + 32) + 5 * (32 * 32 * 9 + 32) + 33;
        assert_eq!(store.numel(), 18 * per);
        let (_, again) = DiscBank::new::<f32>(DiscConfig::default(), 0).unwrap();
        assert_eq!(again.numel(), store.numel());
    }

    #[test]
    fn bands_partition_the_bins() {
        for bins in [65, 129, 513, 7] {
            let rows = band_rows(&DiscConfig::default().band_edges, bins);
            assert_eq!(rows[0].0, 0);
            assert_eq!(rows.last().unwrap().1, bins);
            for w in rows.windows(2) {
                assert_eq!(w[0].1, w[1].0);
            }
        }
    }

    #[test]
    fn narrow_band_shapes_follow_clamped_strides() {
        let (bank, store) = DiscBank::new::<f32>(DiscConfig::default(), 1).unwrap();
        let mut g = Graph::<f32>::new();
        let pv = g.params(&store, false);
        let x = g.constant(Tensor::full(vec![1, 4000], 0.1f32));
        let outs = bank.forward(&mut g, &pv, x).unwrap();
        // window 128: 65 bins, band 0 is rows [0, 6); 4000/64 → 63 frames
        let d = bank.discs.iter().position(|d| d.window == 128 && d.band == Some(0)).unwrap();
        let (mut h, mut w) = (6, 63);
        for f in &outs[d].features {
            h = layer_out(h);
            w = layer_out(w);
            assert_eq!(g.shape(*f), &[1, 32, h, w]);
        }
        assert!(outs.iter().all(|o| o.features.len() == 6));
    }
}
