//! Parameterised building blocks. Each layer only stores [`ParamId`]s; the
//! values live in a [`ParamStore`] and enter a graph as leaves.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Conv2dCfg, Graph, NormAxes, ParamId, ParamStore, Real, Tensor, Var};

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a, T, R> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

impl<T: Real, R: Rng> Builder<'_, T, R> {
    /// `uniform(±1/√fan_in)` weights.
    pub fn weight(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::uniform(shape, bound, self.rng);
        self.store.add(name, t)
    }

    pub fn filled(&mut self, name: String, shape: Vec<usize>, v: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, T::lit(v)))
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub cfg: Conv2dCfg,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        k: (usize, usize),
        groups: usize,
        bias: bool,
        cfg: Conv2dCfg,
    ) -> Self {
        let fan_in = cin / groups * k.0 * k.1;
        let w = b.weight(format!("{name}.w"), vec![cout, cin / groups, k.0, k.1], fan_in);
        let bias = bias.then(|| b.filled(format!("{name}.b"), vec![cout], 0.0));
        Self {
            w,
            b: bias,
            cfg: cfg.groups(groups),
        }
    }

    pub fn pointwise<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(b, name, cin, cout, (1, 1), 1, true, Conv2dCfg::default())
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, pv: &[Var], x: Var) -> Result<Var> {
        g.conv2d(x, pv[self.w.0], self.b.map(|b| pv[b.0]), self.cfg)
    }
}

/// SnakeBeta with per-channel log-parameters initialised to zero.
#[derive(Clone, Debug)]
pub struct Snake {
    pub log_alpha: ParamId,
    pub log_beta: ParamId,
}

impl Snake {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, c: usize) -> Self {
        Self {
            log_alpha: b.filled(format!("{name}.log_alpha"), vec![c], 0.0),
            log_beta: b.filled(format!("{name}.log_beta"), vec![c], 0.0),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, pv: &[Var], x: Var) -> Result<Var> {
        g.snake_beta(x, pv[self.log_alpha.0], pv[self.log_beta.0])
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub axes: NormAxes,
}

pub const NORM_EPS: f64 = 1e-5;

impl Norm {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, c: usize, axes: NormAxes) -> Self {
        Self {
            gamma: b.filled(format!("{name}.gamma"), vec![c], 1.0),
            beta: b.filled(format!("{name}.beta"), vec![c], 0.0),
            axes,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, pv: &[Var], x: Var) -> Result<Var> {
        g.instance_norm(x, pv[self.gamma.0], pv[self.beta.0], self.axes, NORM_EPS)
    }
}

/// Dense layer on `N×in` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, din: usize, dout: usize) -> Self {
        Self {
            w: b.weight(format!("{name}.w"), vec![din, dout], din),
            b: b.filled(format!("{name}.b"), vec![dout], 0.0),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, pv: &[Var], x: Var) -> Result<Var> {
        let y = g.matmul(x, pv[self.w.0])?;
        g.add(y, pv[self.b.0])
    }
}

/// Time handling of a residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeMode {
    /// Centred kernel; `down` halves the time axis.
    Centered { down: bool },
    /// Left-padded kernel; `up` doubles the time axis first.
    Causal { up: bool },
}

/// Geometry of one inverted-bottleneck block.
#[derive(Clone, Copy, Debug)]
pub struct BlockSpec {
    pub cin: usize,
    pub cout: usize,
    pub hidden: usize,
    pub kf: usize,
    pub kt: usize,
    pub dilation: usize,
    pub time: TimeMode,
    /// Halve (encoder) or double (decoder) the frequency axis.
    pub scale_freq: bool,
}

/// Inverted-bottleneck residual block:
/// `pw(C→H) → Snake → [upsample] → depthwise → norm → Snake → pw(H→C_out)`
/// plus a skip path (1×1 conv when the channel count changes).
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub spec: BlockSpec,
    pw1: Conv,
    act1: Snake,
    dw: Conv,
    norm: Norm,
    act2: Snake,
    pw2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, s: BlockSpec) -> Self {
        let fstride = match s.time {
            TimeMode::Centered { .. } if s.scale_freq => 2,
            _ => 1,
        };
        let pf = (s.kf - 1) / 2;
        let span_t = s.dilation * (s.kt - 1);
        let dw_cfg = match s.time {
            TimeMode::Centered { down } => Conv2dCfg::default()
                .stride(fstride, if down { 2 } else { 1 })
                .dilation(1, s.dilation)
                .pad(pf, s.kf - 1 - pf, span_t / 2, span_t - span_t / 2),
            TimeMode::Causal { .. } => Conv2dCfg::default()
                .dilation(1, s.dilation)
                .pad(pf, s.kf - 1 - pf, span_t, 0),
        };
        Self {
            spec: s,
            pw1: Conv::pointwise(b, &format!("{name}.pw1"), s.cin, s.hidden),
            act1: Snake::new(b, &format!("{name}.act1"), s.hidden),
            dw: Conv::new(b, &format!("{name}.dw"), s.hidden, s.hidden, (s.kf, s.kt), s.hidden, true, dw_cfg),
            norm: Norm::new(b, &format!("{name}.norm"), s.hidden, NormAxes::ChannelHeight),
            act2: Snake::new(b, &format!("{name}.act2"), s.hidden),
            pw2: Conv::pointwise(b, &format!("{name}.pw2"), s.hidden, s.cout),
            skip: (s.cin != s.cout).then(|| Conv::pointwise(b, &format!("{name}.skip"), s.cin, s.cout)),
        }
    }

    fn up_factors(&self) -> (usize, usize) {
        match self.spec.time {
            TimeMode::Causal { up } => (
                if self.spec.scale_freq { 2 } else { 1 },
                if up { 2 } else { 1 },
            ),
            TimeMode::Centered { .. } => (1, 1),
        }
    }

    /// Skip path for the encoder: strided subsampling matching the main
    /// path's output grid.
    fn down_skip<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (sf, st) = self.dw.cfg.stride;
        if sf == 1 && st == 1 {
            return Ok(x);
        }
        let c = self.spec.cin;
        let w = g.constant(Tensor::full(vec![c, 1, 1, 1], T::one()));
        g.conv2d(x, w, None, Conv2dCfg::default().groups(c).stride(sf, st))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, pv: &[Var], x: Var) -> Result<Var> {
        let (uf, ut) = self.up_factors();
        let h = self.pw1.forward(g, pv, x)?;
        let h = self.act1.forward(g, pv, h)?;
        let h = if uf > 1 || ut > 1 {
            g.upsample_nearest(h, uf, ut)?
        } else {
            h
        };
        let h = self.dw.forward(g, pv, h)?;
        let h = self.norm.forward(g, pv, h)?;
        let h = self.act2.forward(g, pv, h)?;
        let h = self.pw2.forward(g, pv, h)?;
        let s = match self.spec.time {
            TimeMode::Centered { .. } => self.down_skip(g, x)?,
            TimeMode::Causal { .. } => x,
        };
        let s = match &self.skip {
            Some(conv) => conv.forward(g, pv, s)?,
            None => s,
        };
        let s = if uf > 1 || ut > 1 {
            g.upsample_nearest(s, uf, ut)?
        } else {
            s
        };
        g.add(h, s)
    }
}
