//! Encoder receptive field: kernel/stride/dilation arithmetic and an
//! empirical perturbation probe.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Model, ModelConfig, TIME_FACTOR};
use crate::error::Result;
use crate::tensor::{Graph, ParamStore, Tensor};

/// Layer description used by [`analytic_frames`].
#[derive(Clone, Copy, Debug)]
pub struct TimeLayer {
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
}

/// Span in input frames seen by one output frame of a layer stack.
pub fn analytic_frames(layers: &[TimeLayer]) -> usize {
    let mut rf = 1;
    let mut jump = 1;
    for l in layers {
        rf += (l.kernel - 1) * l.dilation * jump;
        jump *= l.stride;
    }
    rf
}

/// Time layers of the encoder (pointwise convs and the frame-wise norm add
/// nothing).
pub fn encoder_layers(cfg: &ModelConfig) -> Vec<TimeLayer> {
    (0..8)
        .map(|i| TimeLayer {
            kernel: cfg.enc_time_kernel,
            dilation: cfg.enc_dilations[i],
            stride: if cfg.time_down_blocks.contains(&i) { 2 } else { 1 },
        })
        .collect()
}

pub fn encoder_frames(cfg: &ModelConfig) -> usize {
    analytic_frames(&encoder_layers(cfg))
}

/// Receptive field in seconds: frames × hop / sample rate.
pub fn encoder_seconds(cfg: &ModelConfig) -> f64 {
    (encoder_frames(cfg) * cfg.hop()) as f64 / cfg.sample_rate as f64
}

/// Perturb each input frame in turn and record which ones change the
/// latent frame in the middle of the output; returns `last − first + 1`.
///
/// `frames` is the input length in STFT frames (a multiple of 8) and must
/// leave the receptive field of the middle latent frame clear of the edges.
pub fn probe_frames(model: &Model, params: &ParamStore<f32>, frames: usize, seed: u64) -> Result<usize> {
    let f = model.cfg.freq_bins();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = Tensor::<f32>::randn(vec![1, 2, f, frames], &mut rng);
    let target = frames / TIME_FACTOR / 2;
    let d = model.cfg.latent_dim;
    let m = frames / TIME_FACTOR;
    let run = |x: Tensor<f32>| -> Result<Vec<f32>> {
        let mut g = Graph::<f32>::new();
        let pv = g.params(params, false);
        let xv = g.constant(x);
        let lat = model.encode(&mut g, &pv, xv, None)?;
        let mu = g.data(lat.mu);
        Ok((0..d).map(|k| mu[k * m + target]).collect())
    };
    let reference = run(base.clone())?;
    let bump = Tensor::<f32>::randn(vec![2 * f], &mut rng);
    let (mut first, mut last) = (None, None);
    for t in 0..frames {
        let mut x = base.clone();
        for (row, b) in x.data_mut().chunks_mut(frames).zip(bump.data()) {
            row[t] += 1.0 + b.abs();
        }
        if run(x)? != reference {
            first.get_or_insert(t);
            last = Some(t);
        }
    }
    Ok(match (first, last) {
        (Some(a), Some(b)) => b - a + 1,
        _ => 0,
    })
}

/// Narrow encoder with randomly drawn kernel, dilations and downsampling
/// blocks, for probing.
pub fn random_small_config(seed: u64) -> ModelConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks: Vec<usize> = (0..8).collect();
    blocks.shuffle(&mut rng);
    let mut down = blocks[..3].to_vec();
    down.sort_unstable();
    ModelConfig {
        name: format!("probe{seed}"),
        channels: vec![2; 8],
        latent_dim: 2,
        enc_time_kernel: *[3, 5].choose(&mut rng).expect("non-empty"),
        enc_dilations: (0..8).map(|_| rng.gen_range(1..=3)).collect(),
        time_down_blocks: down,
        teacher_dim: 4,
        ..ModelConfig::preset("tiny").expect("built-in preset")
    }
}

/// Input length in frames that keeps the middle latent frame's receptive
/// field away from both edges.
pub fn probe_length(cfg: &ModelConfig) -> usize {
    (2 * encoder_frames(cfg)).div_ceil(TIME_FACTOR) * TIME_FACTOR + 4 * TIME_FACTOR
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pointwise_layer_sees_one_frame() {
        let l = TimeLayer {
            kernel: 1,
            dilation: 1,
            stride: 1,
        };
        assert_eq!(analytic_frames(&[l]), 1);
    }

    #[test]
    fn default_schedule_lands_near_five_seconds() {
        let cfg = ModelConfig::preset("small64").unwrap();
        assert_eq!(encoder_frames(&cfg), 349);
        let s = encoder_seconds(&cfg);
        assert!((4.5..=6.5).contains(&s), "{s}");
    }

    #[test]
    fn probe_matches_analytic_on_random_configs() {
        for seed in 0..5 {
            let cfg = random_small_config(seed);
            let (m, p) = Model::new::<f32>(cfg.clone(), seed).unwrap();
            let probed = probe_frames(&m, &p, probe_length(&cfg), seed).unwrap();
            assert_eq!(probed, encoder_frames(&cfg), "{cfg:?}");
        }
    }
}
