//! AdamW, weight EMA and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient contained NaN or infinity; nothing was modified.
    SkippedNonFinite,
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
    skipped: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = |p: &Tensor<T>| vec![T::zero(); p.len()];
        Self {
            cfg,
            m: params.iter().map(|(_, p)| zeros(p)).collect(),
            v: params.iter().map(|(_, p)| zeros(p)).collect(),
            t: 0,
            skipped: 0,
        }
    }

    /// Number of applied steps.
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// Restore state saved with [`AdamW::moments`], `t` and `skipped`.
    pub fn restore(&mut self, m: Vec<Vec<T>>, v: Vec<Vec<T>>, t: u64, skipped: u64) -> Result<()> {
        let ok = |a: &[Vec<T>], b: &[Vec<T>]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len())
        };
        if !ok(&m, &self.m) || !ok(&v, &self.v) {
            return Err(Error::shape("adamw_restore", "moment buffers do not match parameters"));
        }
        self.m = m;
        self.v = v;
        self.t = t;
        self.skipped = skipped;
        Ok(())
    }

    /// Apply one update. `grads[i]` belongs to parameter `i` of `params`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>]) -> Result<StepOutcome> {
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adamw",
                format!(
                    "{} gradients for {} parameters ({} moment buffers)",
                    grads.len(),
                    params.len(),
                    self.m.len()
                ),
            ));
        }
        for (id, g) in params.ids().zip(grads) {
            if params.get(id).len() != g.len() {
                return Err(Error::shape(
                    "adamw",
                    format!("{}: gradient has {} elements", params.name(id), g.len()),
                ));
            }
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            self.skipped += 1;
            log::warn!("adamw: non-finite gradient, step skipped ({} so far)", self.skipped);
            return Ok(StepOutcome::SkippedNonFinite);
        }
        self.t += 1;
        let c = self.cfg;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powf(self.t as f64));
        let bc2 = T::lit(1.0 - c.beta2.powf(self.t as f64));
        let lr = T::lit(c.lr);
        let decay = T::lit(1.0 - c.lr * c.weight_decay);
        let eps = T::lit(c.eps);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for k in 0..p.len() {
                m[k] = b1 * m[k] + one_b1 * g[k];
                v[k] = b2 * v[k] + one_b2 * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] = p[k] * decay - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

/// Exponential moving average of a parameter set.
#[derive(Clone, Debug)]
pub struct Ema<T> {
    pub momentum: f64,
    shadow: ParamStore<T>,
}

impl<T: Real> Ema<T> {
    pub fn new(params: &ParamStore<T>, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::InvalidParam(format!(
                "EMA momentum {momentum} outside [0, 1]"
            )));
        }
        Ok(Self {
            momentum,
            shadow: params.clone(),
        })
    }

    pub fn shadow(&self) -> &ParamStore<T> {
        &self.shadow
    }

    pub fn shadow_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.shadow
    }

    /// `shadow ← m·shadow + (1 − m)·params`.
    pub fn update(&mut self, params: &ParamStore<T>) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(Error::shape(
                "ema_update",
                format!("{} parameters vs {} shadows", params.len(), self.shadow.len()),
            ));
        }
        let m = T::lit(self.momentum);
        let om = T::lit(1.0 - self.momentum);
        for id in params.ids() {
            let p = params.get(id);
            if p.shape() != self.shadow.get(id).shape() {
                return Err(Error::shape(
                    "ema_update",
                    format!(
                        "{}: {:?} vs shadow {:?}",
                        params.name(id),
                        p.shape(),
                        self.shadow.get(id).shape()
                    ),
                ));
            }
            let s = self.shadow.get_mut(id).data_mut();
            for (s, &x) in s.iter_mut().zip(p.data()) {
                *s = m * *s + om * x;
            }
        }
        Ok(())
    }
}

/// Scale `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_grad_norm<T: Real>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let total = grads
        .iter()
        .flatten()
        .map(|g| {
            let g = g.as_f64();
            g * g
        })
        .sum::<f64>()
        .sqrt();
    if total.is_finite() && total > max_norm && max_norm > 0.0 {
        let s = T::lit(max_norm / (total + 1e-12));
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_f64(vec![1], &[v]).unwrap());
        s
    }

    #[test]
    fn one_step_matches_scalar_reference() {
        let mut p = single(1.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.5,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[vec![1.0]]).unwrap();
        // m = 0.5, v = 0.01, m̂ = 1, v̂ = 1
        let m_hat = 0.5 / (1.0 - 0.5);
        let v_hat = 0.01 / (1.0 - 0.99);
        let expect = 1.0 - 0.1 * m_hat / (f64::sqrt(v_hat) + 1e-8);
        assert!((p.get(super::super::ParamId(0)).data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_without_decay_is_noop() {
        let mut p = single(0.7);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &p,
        );
        for _ in 0..5 {
            opt.step(&mut p, &[vec![0.0]]).unwrap();
        }
        assert_eq!(p.get(super::super::ParamId(0)).data()[0], 0.7);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = single(2.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[vec![0.0]]).unwrap();
        assert!((p.get(super::super::ParamId(0)).data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_skips() {
        let mut p = single(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let r = opt.step(&mut p, &[vec![f64::NAN]]).unwrap();
        assert_eq!(r, StepOutcome::SkippedNonFinite);
        assert_eq!(opt.skipped(), 1);
        assert_eq!(opt.t(), 0);
        assert_eq!(p.get(super::super::ParamId(0)).data()[0], 1.0);
    }

    #[test]
    fn quadratic_descends_monotonically() {
        let mut p = single(3.0);
        let cfg = AdamWConfig {
            lr: 0.05,
            beta1: 0.5,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut opt = AdamW::new(cfg, &p);
        let mut last = f64::INFINITY;
        for _ in 0..40 {
            let x = p.get(super::super::ParamId(0)).data()[0];
            let loss = x * x;
            assert!(loss < last);
            last = loss;
            opt.step(&mut p, &[vec![2.0 * x]]).unwrap();
        }
    }

    #[test]
    fn ema_closed_form() {
        let mut shadow0 = single(0.0);
        let params = single(1.0);
        let mut ema = Ema::new(&shadow0, 0.9).unwrap();
        for _ in 0..7 {
            ema.update(&params).unwrap();
        }
        let got = ema.shadow().get(super::super::ParamId(0)).data()[0];
        assert!((got - (1.0 - 0.9f64.powi(7))).abs() < 1e-12);

        let mut frozen = Ema::new(&shadow0, 1.0).unwrap();
        frozen.update(&params).unwrap();
        assert_eq!(frozen.shadow().get(super::super::ParamId(0)).data()[0], 0.0);

        let mut copy = Ema::new(&shadow0, 0.0).unwrap();
        copy.update(&params).unwrap();
        assert_eq!(copy.shadow().get(super::super::ParamId(0)).data()[0], 1.0);

        shadow0.add("extra", Tensor::zeros(vec![2]));
        let mut bad = Ema::new(&shadow0, 0.5).unwrap();
        assert!(bad.update(&params).is_err());
    }

    #[test]
    fn clipping_scales_to_norm() {
        let mut g = vec![vec![3.0f64], vec![4.0]];
        let n = clip_grad_norm(&mut g, 1.0);
        assert!((n - 5.0).abs() < 1e-12);
        assert!((g[0][0] - 0.6).abs() < 1e-9 && (g[1][0] - 0.8).abs() < 1e-9);
        let mut small = vec![vec![0.1f64]];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }
}
