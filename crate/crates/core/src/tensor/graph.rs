//! Tape-based computation graph.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and `backward` is a single reverse sweep. A graph
//! supports exactly one backward pass; build a fresh graph per step.

use std::sync::Arc;

use super::COSINE_EPS;
use super::conv::{self, Conv2dCfg, ConvGeom};
use super::{ParamStore, Real, Tensor};
use crate::dsp::stft::StftPlan;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction groups for [`Graph::instance_norm`] on `N×C×H×W` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormAxes {
    /// One group per `(n, c)` over `H×W` (classic instance norm).
    Spatial,
    /// One group per `(n, w)` over `C×H`; every column is normalised on its
    /// own, so the op never mixes information across the last axis.
    ChannelHeight,
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnKind {
    Abs,
    Exp,
    Log,
    Sin,
    Square,
    Sqrt,
    Tanh,
    LeakyRelu(f64),
    Clamp(f64, f64),
    Scale(f64),
    AddScalar(f64),
}

enum Op<T: Real> {
    Leaf,
    Binary {
        kind: BinKind,
        a: usize,
        b: usize,
        sa: Vec<usize>,
        sb: Vec<usize>,
    },
    Unary {
        kind: UnKind,
        a: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    Upsample {
        x: usize,
        fh: usize,
        fw: usize,
    },
    Sum {
        a: usize,
        strides: Vec<usize>,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        strides: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    NormalizeRows {
        a: usize,
        norms: Vec<T>,
    },
    LogSoftmax {
        a: usize,
    },
    InstanceNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        axes: NormAxes,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Snake {
        x: usize,
        log_alpha: usize,
        log_beta: usize,
    },
    Stft {
        x: usize,
        plan: Arc<StftPlan<T>>,
    },
    Istft {
        x: usize,
        plan: Arc<StftPlan<T>>,
    },
    PowerLaw {
        x: usize,
        p: f64,
        eps: f64,
    },
}

struct Node<T: Real> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded computation.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Epsilon used by SnakeBeta: `x + sin²(αx) / (β + ε)`.
pub const SNAKE_EPS: f64 = 1e-9;

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// Strides that map an index over `big` onto a broadcastable `small`
/// (right-aligned, size-1 or missing axes get stride 0).
fn bcast_strides(big: &[usize], small: &[usize]) -> Vec<usize> {
    let rs = row_major_strides(small);
    let off = big.len() - small.len();
    (0..big.len())
        .map(|i| {
            if i < off || small[i - off] == 1 {
                0
            } else {
                rs[i - off]
            }
        })
        .collect()
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Visit every index of `shape` in row-major order together with the two
/// offsets given by `sa` and `sb`.
#[inline]
fn for_each2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = shape.iter().product();
    if total == 0 {
        return;
    }
    let rank = shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = shape[rank - 1];
    let (ia_in, ib_in) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0usize;
    loop {
        let (mut pa, mut pb) = (oa, ob);
        for _ in 0..inner {
            f(o, pa, pb);
            o += 1;
            pa += ia_in;
            pb += ib_in;
        }
        // advance the outer odometer
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

fn acc_into<T: Real>(grads: &mut [Option<Vec<T>>], idx: usize, len: usize) -> &mut Vec<T> {
    grads[idx].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v.0)
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.data(v)[0]
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn constant_scalar(&mut self, v: T) -> Var {
        self.leaf(Tensor::scalar(v), false)
    }

    fn shared_leaf(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Insert every parameter of `store` as a leaf; the returned vector is
    /// indexed by [`ParamId`].
    pub fn params(&mut self, store: &ParamStore<T>, requires_grad: bool) -> Vec<Var> {
        store
            .ids()
            .map(|id| self.shared_leaf(store.shared(id), requires_grad))
            .collect()
    }

    /// Copy of `v` cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.shared_leaf(value, false)
    }

    // ----- elementwise -------------------------------------------------

    fn binary(&mut self, kind: BinKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&ash, &bsh)
            .ok_or_else(|| Error::shape(name, format!("{ash:?} vs {bsh:?}")))?;
        let sa = bcast_strides(&out_shape, &ash);
        let sb = bcast_strides(&out_shape, &bsh);
        let (av, bv) = (self.data(a), self.data(b));
        let n: usize = out_shape.iter().product();
        let mut out = vec![T::zero(); n];
        if ash == bsh {
            for ((o, &x), &y) in out.iter_mut().zip(av).zip(bv) {
                *o = bin_apply(kind, x, y);
            }
        } else {
            for_each2(&out_shape, &sa, &sb, |o, ia, ib| {
                out[o] = bin_apply(kind, av[ia], bv[ib]);
            });
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(
            t,
            Op::Binary {
                kind,
                a: a.0,
                b: b.0,
                sa,
                sb,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b, "div")
    }

    fn unary(&mut self, kind: UnKind, a: Var) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| un_apply(kind, v)).collect();
        let t = Tensor {
            shape: x.shape().to_vec(),
            data,
        };
        let rg = self.rg(a.0);
        self.push(t, Op::Unary { kind, a: a.0 }, rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnKind::Abs, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnKind::Log, a)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(UnKind::Sin, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnKind::Square, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnKind::Sqrt, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnKind::Tanh, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(UnKind::LeakyRelu(slope), a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnKind::LeakyRelu(0.0), a)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(UnKind::Clamp(lo, hi), a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnKind::Scale(c), a)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnKind::AddScalar(c), a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    // ----- linear algebra ----------------------------------------------

    /// `(m×k)·(k×n)` matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::shape("matmul", format!("{ash:?} · {bsh:?}")));
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.data(a),
            k as isize,
            1,
            self.data(b),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// 2-D convolution of `N×C×H×W` input with `Co×(C/groups)×kh×kw` weights
    /// and optional per-output-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, cfg: Conv2dCfg) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), cfg)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.co] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.shape(b), geom.co),
                ));
            }
        }
        let out = conv::forward(
            self.data(x),
            self.data(w),
            b.map(|b| self.data(b)),
            &geom,
        );
        let rg = self.rg(x.0) || self.rg(w.0) || b.is_some_and(|b| self.rg(b.0));
        Ok(self.push(
            Tensor::new(geom.out_shape(), out)?,
            Op::Conv {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
            },
            rg,
        ))
    }

    /// Nearest-neighbour upsampling of the last two axes of `N×C×H×W`.
    pub fn upsample_nearest(&mut self, x: Var, fh: usize, fw: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || fh == 0 || fw == 0 {
            return Err(Error::shape("upsample", format!("{s:?} by ({fh}, {fw})")));
        }
        let (h, w) = (s[2], s[3]);
        let (ho, wo) = (h * fh, w * fw);
        let xd = self.data(x);
        let mut out = vec![T::zero(); s[0] * s[1] * ho * wo];
        for (plane, op) in xd.chunks(h * w).zip(out.chunks_mut(ho * wo)) {
            for i in 0..ho {
                let src = &plane[(i / fh) * w..][..w];
                let dst = &mut op[i * wo..][..wo];
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = src[j / fw];
                }
            }
        }
        let rg = self.rg(x.0);
        Ok(self.push(
            Tensor::new(vec![s[0], s[1], ho, wo], out)?,
            Op::Upsample { x: x.0, fh, fw },
            rg,
        ))
    }

    // ----- reductions and shape ----------------------------------------

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axes.iter().any(|&ax| ax >= s.len()) {
            return Err(Error::shape("sum", format!("axes {axes:?} for {s:?}")));
        }
        let out_shape: Vec<usize> = s
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let strides = bcast_strides(&s, &out_shape);
        let zero = vec![0; s.len()];
        let mut out = vec![T::zero(); out_shape.iter().product()];
        let ad = self.data(a);
        for_each2(&s, &strides, &zero, |i, o, _| out[o] += ad[i]);
        let rg = self.rg(a.0);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Sum { a: a.0, strides },
            rg,
        ))
    }

    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        let count: usize = axes.iter().filter_map(|&ax| s.get(ax)).product();
        let sum = self.sum_axes(a, axes)?;
        Ok(self.scale(sum, 1.0 / count.max(1) as f64))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        let s = self.sum_axes(a, &axes)?;
        self.reshape(s, &[])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = self.sum(a)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = (*self.nodes[a.0].value).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a.0);
        Ok(self.push(t, Op::Reshape { a: a.0 }, rg))
    }

    /// General axis permutation; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} for {s:?}")));
        }
        let in_strides = row_major_strides(&s);
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let zero = vec![0; s.len()];
        let ad = self.data(a);
        let mut out = vec![T::zero(); ad.len()];
        for_each2(&out_shape, &strides, &zero, |o, i, _| out[o] = ad[i]);
        let rg = self.rg(a.0);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Permute { a: a.0, strides },
            rg,
        ))
    }

    /// Swap two axes.
    pub fn transpose(&mut self, a: Var, i: usize, j: usize) -> Result<Var> {
        let mut perm: Vec<usize> = (0..self.shape(a).len()).collect();
        if i >= perm.len() || j >= perm.len() {
            return Err(Error::shape(
                "transpose",
                format!("axes ({i}, {j}) for {:?}", self.shape(a)),
            ));
        }
        perm.swap(i, j);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {s0:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let ok = s.len() == s0.len()
                && s.iter()
                    .zip(&s0)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{s:?} vs {s0:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.data(*p)[o * len..][..len]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let rg = parts.iter().any(|p| self.rg(p.0));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
            rg,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(Error::shape(
                "slice",
                format!("{start}..{end} on axis {axis} of {s:?}"),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let len = end - start;
        let ad = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&ad[(o * s[axis] + start) * inner..][..len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(a.0);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Slice {
                a: a.0,
                axis,
                start,
            },
            rg,
        ))
    }

    // ----- normalisation and activations -------------------------------

    /// Scale every row (last axis) to unit L2 norm: `x / sqrt(Σx² + ε)`.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = *s.last().ok_or_else(|| Error::shape("normalize", "scalar input"))?;
        if d == 0 {
            return Err(Error::shape("normalize", format!("{s:?}")));
        }
        let ad = self.data(a);
        let mut out = vec![T::zero(); ad.len()];
        let mut norms = Vec::with_capacity(ad.len() / d);
        for (row, orow) in ad.chunks(d).zip(out.chunks_mut(d)) {
            let n = (row.iter().map(|&x| x * x).sum::<T>() + T::lit(eps)).sqrt();
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = x / n;
            }
            norms.push(n);
        }
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::new(s, out)?, Op::NormalizeRows { a: a.0, norms }, rg))
    }

    /// Cosine similarity between corresponding rows of two `N×D` inputs.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) || self.shape(a).len() != 2 {
            return Err(Error::shape(
                "cosine_similarity",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let na = self.normalize_rows(a, COSINE_EPS)?;
        let nb = self.normalize_rows(b, COSINE_EPS)?;
        let p = self.mul(na, nb)?;
        let s = self.sum_axes(p, &[1])?;
        let n = self.shape(a)[0];
        self.reshape(s, &[n])
    }

    /// Pairwise cosine similarities `N×D`, `M×D` → `N×M`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.normalize_rows(a, COSINE_EPS)?;
        let nb = self.normalize_rows(b, COSINE_EPS)?;
        let bt = self.transpose(nb, 0, 1)?;
        self.matmul(na, bt)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = *s.last().ok_or_else(|| Error::shape("log_softmax", "scalar input"))?;
        let ad = self.data(a);
        let mut out = vec![T::zero(); ad.len()];
        for (row, orow) in ad.chunks(d).zip(out.chunks_mut(d)) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln();
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::new(s, out)?, Op::LogSoftmax { a: a.0 }, rg))
    }

    /// Normalisation of `N×C×H×W` input over the groups selected by `axes`,
    /// followed by a per-channel affine map.
    pub fn instance_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axes: NormAxes,
        eps: f64,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(Error::shape(
                "instance_norm",
                format!(
                    "input {s:?}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (groups, count) = match axes {
            NormAxes::Spatial => (n * c, h * w),
            NormAxes::ChannelHeight => (n * w, c * h),
        };
        let gid = |ni: usize, ci: usize, wi: usize| match axes {
            NormAxes::Spatial => ni * c + ci,
            NormAxes::ChannelHeight => ni * w + wi,
        };
        let xd = self.data(x);
        let mut mean = vec![T::zero(); groups];
        let mut var = vec![T::zero(); groups];
        let inv_count = T::one() / T::lit(count as f64);
        let mut i = 0;
        for ni in 0..n {
            for ci in 0..c {
                for _ in 0..h {
                    for wi in 0..w {
                        mean[gid(ni, ci, wi)] += xd[i];
                        i += 1;
                    }
                }
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_count);
        i = 0;
        for ni in 0..n {
            for ci in 0..c {
                for _ in 0..h {
                    for wi in 0..w {
                        let d = xd[i] - mean[gid(ni, ci, wi)];
                        var[gid(ni, ci, wi)] += d * d;
                        i += 1;
                    }
                }
            }
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v * inv_count + T::lit(eps)).sqrt())
            .collect();
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        i = 0;
        for ni in 0..n {
            for ci in 0..c {
                for _ in 0..h {
                    for wi in 0..w {
                        let g = gid(ni, ci, wi);
                        let xh = (xd[i] - mean[g]) * inv_std[g];
                        xhat[i] = xh;
                        out[i] = gd[ci] * xh + bd[ci];
                        i += 1;
                    }
                }
            }
        }
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        Ok(self.push(
            Tensor::new(s, out)?,
            Op::InstanceNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                axes,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// SnakeBeta activation `x + sin²(αx)/(β + ε)` with `α = e^a`, `β = e^b`
    /// per channel (axis 1).
    pub fn snake_beta(&mut self, x: Var, log_alpha: Var, log_beta: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || self.shape(log_alpha) != [s[1]] || self.shape(log_beta) != [s[1]] {
            return Err(Error::shape(
                "snake_beta",
                format!(
                    "input {s:?}, alpha {:?}, beta {:?}",
                    self.shape(log_alpha),
                    self.shape(log_beta)
                ),
            ));
        }
        let c = s[1];
        let inner: usize = s[2..].iter().product();
        let (la, lb) = (self.data(log_alpha), self.data(log_beta));
        let alpha: Vec<T> = la.iter().map(|v| v.exp()).collect();
        let inv_beta: Vec<T> = lb
            .iter()
            .map(|v| T::one() / (v.exp() + T::lit(SNAKE_EPS)))
            .collect();
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for (blk, (xs, os)) in xd.chunks(inner).zip(out.chunks_mut(inner)).enumerate() {
            let ch = blk % c;
            let (al, ib) = (alpha[ch], inv_beta[ch]);
            for (o, &v) in os.iter_mut().zip(xs) {
                let sn = (al * v).sin();
                *o = v + ib * sn * sn;
            }
        }
        let rg = self.rg(x.0) || self.rg(log_alpha.0) || self.rg(log_beta.0);
        Ok(self.push(
            Tensor::new(s, out)?,
            Op::Snake {
                x: x.0,
                log_alpha: log_alpha.0,
                log_beta: log_beta.0,
            },
            rg,
        ))
    }

    // ----- spectral ------------------------------------------------------

    /// STFT of each row of an `N×L` signal batch → `N×2×F×M` (real, imag).
    pub fn stft(&mut self, x: Var, plan: Arc<StftPlan<T>>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("stft", format!("expected N×L, got {s:?}")));
        }
        let (n, len) = (s[0], s[1]);
        let bins = plan.bins();
        let frames = plan.frames(len);
        let plane = bins * frames;
        let mut out = vec![T::zero(); n * 2 * plane];
        let xd = self.data(x);
        for (row, o) in xd.chunks(len).zip(out.chunks_mut(2 * plane)) {
            let (re, im) = o.split_at_mut(plane);
            plan.analyze(row, re, im)?;
        }
        let rg = self.rg(x.0);
        Ok(self.push(
            Tensor::new(vec![n, 2, bins, frames], out)?,
            Op::Stft { x: x.0, plan },
            rg,
        ))
    }

    /// Inverse of [`Graph::stft`] producing `len` samples per row.
    pub fn istft(&mut self, x: Var, plan: Arc<StftPlan<T>>, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1] != 2 || s[2] != plan.bins() {
            return Err(Error::shape(
                "istft",
                format!("expected N×2×{}×M, got {s:?}", plan.bins()),
            ));
        }
        let (n, frames) = (s[0], s[3]);
        let plane = s[2] * frames;
        let xd = self.data(x);
        let mut out = Vec::with_capacity(n * len);
        for o in xd.chunks(2 * plane) {
            out.extend(plan.synthesize(&o[..plane], &o[plane..], frames, len)?);
        }
        let rg = self.rg(x.0);
        Ok(self.push(
            Tensor::new(vec![n, len], out)?,
            Op::Istft { x: x.0, plan },
            rg,
        ))
    }

    /// Power-law magnitude map on complex pairs stored along axis 1 (size 2):
    /// `z ↦ z·(|z|² + ε)^((p−1)/2)`, phase preserved.
    pub fn power_law(&mut self, x: Var, p: f64, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s[1] != 2 {
            return Err(Error::shape("power_law", format!("expected N×2×…, got {s:?}")));
        }
        let plane: usize = s[2..].iter().product();
        let q = T::lit((p - 1.0) / 2.0);
        let e = T::lit(eps);
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for (xs, os) in xd.chunks(2 * plane).zip(out.chunks_mut(2 * plane)) {
            for i in 0..plane {
                let (re, im) = (xs[i], xs[plane + i]);
                let sc = (re * re + im * im + e).powf(q);
                os[i] = re * sc;
                os[plane + i] = im * sc;
            }
        }
        let rg = self.rg(x.0);
        Ok(self.push(Tensor::new(s, out)?, Op::PowerLaw { x: x.0, p, eps }, rg))
    }

    // ----- backward --------------------------------------------------------

    /// Reverse sweep from the scalar `loss`. Afterwards every leaf created
    /// with `requires_grad` has a gradient (zeros when unreachable). A second
    /// call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward already ran on this graph; build a new graph".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![T::zero(); node.value.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Distances of the recorded values to non-smooth points: the smallest
    /// `|x − kink|` over abs, leaky-ReLU and clamp inputs, and the smallest
    /// complex magnitude entering a power law. Exact zeros are skipped: on
    /// random inputs they are structural (e.g. the imaginary part of the DC
    /// bin) and stay put under perturbation. Both are infinite when no such
    /// op was recorded.
    pub fn kink_margins(&self) -> (f64, f64) {
        let (mut switch, mut power) = (f64::INFINITY, f64::INFINITY);
        for node in &self.nodes {
            match &node.op {
                Op::Unary { kind, a } => {
                    let kinks: &[f64] = match kind {
                        UnKind::Abs | UnKind::LeakyRelu(_) => &[0.0],
                        UnKind::Clamp(lo, hi) => &[*lo, *hi],
                        _ => continue,
                    };
                    for &v in self.nodes[*a].value.data().iter().filter(|v| !v.is_zero()) {
                        for k in kinks {
                            switch = switch.min((v.as_f64() - k).abs());
                        }
                    }
                }
                Op::PowerLaw { x, .. } => {
                    let t = &self.nodes[*x].value;
                    let plane: usize = t.shape()[2..].iter().product();
                    for xs in t.data().chunks(2 * plane) {
                        for i in 0..plane {
                            let m = xs[i].as_f64().hypot(xs[plane + i].as_f64());
                            if m > 0.0 {
                                power = power.min(m);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        (switch, power)
    }

    /// Move the gradient out (avoids a copy for large parameters).
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let val = |j: usize| self.nodes[j].value.data();
        let len = |j: usize| self.nodes[j].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, sa, sb } => {
                let (a, b) = (*a, *b);
                let (av, bv) = (val(a), val(b));
                let same = self.nodes[a].value.shape() == self.nodes[b].value.shape();
                if self.rg(a) {
                    let ga = acc_into(grads, a, len(a));
                    if same {
                        for (o, gv) in g.iter().enumerate() {
                            ga[o] += *gv * bin_da(*kind, av[o], bv[o]);
                        }
                    } else {
                        for_each2(out_shape, sa, sb, |o, ia, ib| {
                            ga[ia] += g[o] * bin_da(*kind, av[ia], bv[ib]);
                        });
                    }
                }
                if self.rg(b) {
                    let gb = acc_into(grads, b, len(b));
                    if same {
                        for (o, gv) in g.iter().enumerate() {
                            gb[o] += *gv * bin_db(*kind, av[o], bv[o]);
                        }
                    } else {
                        for_each2(out_shape, sa, sb, |o, ia, ib| {
                            gb[ib] += g[o] * bin_db(*kind, av[ia], bv[ib]);
                        });
                    }
                }
            }
            Op::Unary { kind, a } => {
                let (xv, yv) = (val(*a), node.value.data());
                let ga = acc_into(grads, *a, len(*a));
                for k in 0..g.len() {
                    ga[k] += g[k] * un_deriv(*kind, xv[k], yv[k]);
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.rg(*a) {
                    let ga = acc_into(grads, *a, m * k);
                    // dA = dY · Bᵀ
                    T::gemm(
                        m, n, k, g, n as isize, 1, val(*b), 1, n as isize, T::one(), ga,
                        k as isize, 1,
                    );
                }
                if self.rg(*b) {
                    let gb = acc_into(grads, *b, k * n);
                    // dB = Aᵀ · dY
                    T::gemm(
                        k, m, n, val(*a), 1, k as isize, g, n as isize, 1, T::one(), gb,
                        n as isize, 1,
                    );
                }
            }
            Op::Conv { x, w, b, geom } => {
                let need = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                let cg = conv::backward(val(*x), val(*w), g, geom, need);
                add_opt(grads, *x, cg.dx);
                add_opt(grads, *w, cg.dw);
                if let Some(b) = b {
                    add_opt(grads, *b, cg.db);
                }
            }
            Op::Upsample { x, fh, fw } => {
                let s = self.nodes[*x].value.shape();
                let (h, w) = (s[2], s[3]);
                let (ho, wo) = (h * fh, w * fw);
                let gx = acc_into(grads, *x, len(*x));
                for (gp, op) in gx.chunks_mut(h * w).zip(g.chunks(ho * wo)) {
                    for i in 0..ho {
                        let row = &op[i * wo..][..wo];
                        let dst = &mut gp[(i / fh) * w..][..w];
                        for (j, v) in row.iter().enumerate() {
                            dst[j / fw] += *v;
                        }
                    }
                }
            }
            Op::Sum { a, strides } => {
                let s = self.nodes[*a].value.shape().to_vec();
                let zero = vec![0; s.len()];
                let ga = acc_into(grads, *a, len(*a));
                for_each2(&s, strides, &zero, |k, o, _| ga[k] += g[o]);
            }
            Op::Reshape { a } => {
                let ga = acc_into(grads, *a, len(*a));
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += *s);
            }
            Op::Permute { a, strides } => {
                let zero = vec![0; strides.len()];
                let ga = acc_into(grads, *a, len(*a));
                for_each2(out_shape, strides, &zero, |o, k, _| ga[k] += g[o]);
            }
            Op::Concat { parts, axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut off = 0;
                for &p in parts {
                    let plen = self.nodes[p].value.shape()[*axis] * inner;
                    if self.rg(p) {
                        let gp = acc_into(grads, p, len(p));
                        for o in 0..outer {
                            let src = &g[o * total * inner + off..][..plen];
                            gp[o * plen..][..plen]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += *s);
                        }
                    }
                    off += plen;
                }
            }
            Op::Slice { a, axis, start } => {
                let s = self.nodes[*a].value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let l = out_shape[*axis] * inner;
                let full = s[*axis];
                let ga = acc_into(grads, *a, len(*a));
                for o in 0..outer {
                    ga[(o * full + start) * inner..][..l]
                        .iter_mut()
                        .zip(&g[o * l..][..l])
                        .for_each(|(d, s)| *d += *s);
                }
            }
            Op::NormalizeRows { a, norms } => {
                let d = *out_shape.last().unwrap_or(&1);
                let y = node.value.data();
                let ga = acc_into(grads, *a, len(*a));
                for (r, n) in norms.iter().enumerate() {
                    let (yr, gr) = (&y[r * d..][..d], &g[r * d..][..d]);
                    let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    for j in 0..d {
                        ga[r * d + j] += (gr[j] - yr[j] * dot) / *n;
                    }
                }
            }
            Op::LogSoftmax { a } => {
                let d = *out_shape.last().unwrap_or(&1);
                let y = node.value.data();
                let ga = acc_into(grads, *a, len(*a));
                for r in 0..y.len() / d {
                    let (yr, gr) = (&y[r * d..][..d], &g[r * d..][..d]);
                    let gs: T = gr.iter().copied().sum();
                    for j in 0..d {
                        ga[r * d + j] += gr[j] - yr[j].exp() * gs;
                    }
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                axes,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
                let gd = val(*gamma);
                let groups = inv_std.len();
                let count = T::lit(match axes {
                    NormAxes::Spatial => (h * w) as f64,
                    NormAxes::ChannelHeight => (c * h) as f64,
                });
                let gid = |ni: usize, ci: usize, wi: usize| match axes {
                    NormAxes::Spatial => ni * c + ci,
                    NormAxes::ChannelHeight => ni * w + wi,
                };
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut m1 = vec![T::zero(); groups];
                let mut m2 = vec![T::zero(); groups];
                let mut i = 0;
                for ni in 0..n {
                    for ci in 0..c {
                        for _ in 0..h {
                            for wi in 0..w {
                                let gg = gid(ni, ci, wi);
                                let dxh = g[i] * gd[ci];
                                m1[gg] += dxh;
                                m2[gg] += dxh * xhat[i];
                                dgamma[ci] += g[i] * xhat[i];
                                dbeta[ci] += g[i];
                                i += 1;
                            }
                        }
                    }
                }
                if self.rg(*x) {
                    let gx = acc_into(grads, *x, len(*x));
                    let mut i = 0;
                    for ni in 0..n {
                        for ci in 0..c {
                            for _ in 0..h {
                                for wi in 0..w {
                                    let gg = gid(ni, ci, wi);
                                    let dxh = g[i] * gd[ci];
                                    gx[i] += inv_std[gg]
                                        * (dxh - m1[gg] / count - xhat[i] * m2[gg] / count);
                                    i += 1;
                                }
                            }
                        }
                    }
                }
                if self.rg(*gamma) {
                    add_into(grads, *gamma, &dgamma);
                }
                if self.rg(*beta) {
                    add_into(grads, *beta, &dbeta);
                }
            }
            Op::Snake {
                x,
                log_alpha,
                log_beta,
            } => {
                let c = out_shape[1];
                let inner: usize = out_shape[2..].iter().product();
                let (la, lb) = (val(*log_alpha), val(*log_beta));
                let xd = val(*x);
                let mut dla = vec![T::zero(); c];
                let mut dlb = vec![T::zero(); c];
                let want_x = self.rg(*x);
                let mut gx = want_x.then(|| vec![T::zero(); xd.len()]);
                for (blk, (xs, gs)) in xd.chunks(inner).zip(g.chunks(inner)).enumerate() {
                    let ch = blk % c;
                    let alpha = la[ch].exp();
                    let beta = lb[ch].exp();
                    let ib = T::one() / (beta + T::lit(SNAKE_EPS));
                    let (mut sa, mut sb) = (T::zero(), T::zero());
                    for (k, (&v, &gv)) in xs.iter().zip(gs).enumerate() {
                        let s2 = (T::lit(2.0) * alpha * v).sin();
                        let sn = (alpha * v).sin();
                        if let Some(gx) = gx.as_mut() {
                            gx[blk * inner + k] = gv * (T::one() + alpha * ib * s2);
                        }
                        sa += gv * ib * s2 * v * alpha;
                        sb -= gv * sn * sn * ib * ib * beta;
                    }
                    dla[ch] += sa;
                    dlb[ch] += sb;
                }
                add_opt(grads, *x, gx);
                if self.rg(*log_alpha) {
                    add_into(grads, *log_alpha, &dla);
                }
                if self.rg(*log_beta) {
                    add_into(grads, *log_beta, &dlb);
                }
            }
            Op::Stft { x, plan } => {
                let l = self.nodes[*x].value.shape()[1];
                let plane = out_shape[2] * out_shape[3];
                let gx = acc_into(grads, *x, len(*x));
                for (go, gr) in g.chunks(2 * plane).zip(gx.chunks_mut(l)) {
                    plan.analyze_adjoint(&go[..plane], &go[plane..], l, gr)?;
                }
            }
            Op::Istft { x, plan } => {
                let s = self.nodes[*x].value.shape();
                let frames = s[3];
                let plane = s[2] * frames;
                let l = out_shape[1];
                let gx = acc_into(grads, *x, len(*x));
                for (go, gi) in g.chunks(l).zip(gx.chunks_mut(2 * plane)) {
                    let (gre, gim) = gi.split_at_mut(plane);
                    plan.synthesize_adjoint(go, frames, gre, gim)?;
                }
            }
            Op::PowerLaw { x, p, eps } => {
                let plane: usize = out_shape[2..].iter().product();
                let q = T::lit((p - 1.0) / 2.0);
                let e = T::lit(*eps);
                let two = T::lit(2.0);
                let xd = val(*x);
                let gx = acc_into(grads, *x, len(*x));
                for ((xs, gs), gi) in xd
                    .chunks(2 * plane)
                    .zip(g.chunks(2 * plane))
                    .zip(gx.chunks_mut(2 * plane))
                {
                    for i in 0..plane {
                        let (re, im) = (xs[i], xs[plane + i]);
                        let r2 = re * re + im * im + e;
                        let sc = r2.powf(q);
                        let dsc = q * sc / r2 * two; // d sc / d(r²) · 2
                        let (g0, g1) = (gs[i], gs[plane + i]);
                        // out = (re, im)·sc
                        let common = g0 * re + g1 * im;
                        gi[i] += g0 * sc + common * dsc * re;
                        gi[plane + i] += g1 * sc + common * dsc * im;
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_opt<T: Real>(grads: &mut [Option<Vec<T>>], idx: usize, g: Option<Vec<T>>) {
    if let Some(g) = g {
        match &mut grads[idx] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
            slot @ None => *slot = Some(g),
        }
    }
}

fn add_into<T: Real>(grads: &mut [Option<Vec<T>>], idx: usize, g: &[T]) {
    let acc = acc_into(grads, idx, g.len());
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b);
}

#[inline]
fn bin_apply<T: Real>(k: BinKind, a: T, b: T) -> T {
    match k {
        BinKind::Add => a + b,
        BinKind::Sub => a - b,
        BinKind::Mul => a * b,
        BinKind::Div => a / b,
    }
}

#[inline]
fn bin_da<T: Real>(k: BinKind, _a: T, b: T) -> T {
    match k {
        BinKind::Add | BinKind::Sub => T::one(),
        BinKind::Mul => b,
        BinKind::Div => T::one() / b,
    }
}

#[inline]
fn bin_db<T: Real>(k: BinKind, a: T, b: T) -> T {
    match k {
        BinKind::Add => T::one(),
        BinKind::Sub => -T::one(),
        BinKind::Mul => a,
        BinKind::Div => -a / (b * b),
    }
}

#[inline]
fn un_apply<T: Real>(k: UnKind, x: T) -> T {
    match k {
        UnKind::Abs => x.abs(),
        UnKind::Exp => x.exp(),
        UnKind::Log => x.ln(),
        UnKind::Sin => x.sin(),
        UnKind::Square => x * x,
        UnKind::Sqrt => x.sqrt(),
        UnKind::Tanh => x.tanh(),
        UnKind::LeakyRelu(s) => {
            if x > T::zero() {
                x
            } else {
                x * T::lit(s)
            }
        }
        UnKind::Clamp(lo, hi) => x.max(T::lit(lo)).min(T::lit(hi)),
        UnKind::Scale(c) => x * T::lit(c),
        UnKind::AddScalar(c) => x + T::lit(c),
    }
}

#[inline]
fn un_deriv<T: Real>(k: UnKind, x: T, y: T) -> T {
    match k {
        UnKind::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        UnKind::Exp => y,
        UnKind::Log => T::one() / x,
        UnKind::Sin => x.cos(),
        UnKind::Square => x + x,
        UnKind::Sqrt => T::lit(0.5) / y,
        UnKind::Tanh => T::one() - y * y,
        UnKind::LeakyRelu(s) => {
            if x > T::zero() {
                T::one()
            } else {
                T::lit(s)
            }
        }
        UnKind::Clamp(lo, hi) => {
            if x >= T::lit(lo) && x <= T::lit(hi) {
                T::one()
            } else {
                T::zero()
            }
        }
        UnKind::Scale(c) => T::lit(c),
        UnKind::AddScalar(_) => T::one(),
    }
}
