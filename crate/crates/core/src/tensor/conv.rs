//! 2-D convolution kernels (NCHW), shared by forward and backward passes.
//!
//! Three paths: pointwise (1×1, unit stride, no padding) runs straight
//! through GEMM, depthwise (one filter per channel) runs as direct loops,
//! everything else goes through im2col + GEMM per group.

use super::Real;
use crate::error::{Error, Result};

/// Convolution hyperparameters. Padding is `[top, bottom, left, right]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dCfg {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub pad: [usize; 4],
    pub groups: usize,
}

impl Default for Conv2dCfg {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            dilation: (1, 1),
            pad: [0; 4],
            groups: 1,
        }
    }
}

impl Conv2dCfg {
    pub fn stride(mut self, sh: usize, sw: usize) -> Self {
        self.stride = (sh, sw);
        self
    }

    pub fn dilation(mut self, dh: usize, dw: usize) -> Self {
        self.dilation = (dh, dw);
        self
    }

    pub fn pad(mut self, top: usize, bottom: usize, left: usize, right: usize) -> Self {
        self.pad = [top, bottom, left, right];
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// Output length along one axis, or `None` when the kernel does not fit.
    pub fn out_len(len: usize, pad: usize, k: usize, dilation: usize, stride: usize) -> Option<usize> {
        let span = dilation * (k - 1) + 1;
        let padded = len + pad;
        if padded < span || stride == 0 {
            return None;
        }
        Some((padded - span) / stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub cfg: Conv2dCfg,
}

impl ConvGeom {
    pub fn new(xs: &[usize], ws: &[usize], cfg: Conv2dCfg) -> Result<Self> {
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?} and weight {ws:?} must both be rank 4"),
            ));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, cig, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let g = cfg.groups;
        if g == 0 || c % g != 0 || co % g != 0 || cig * g != c || kh == 0 || kw == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?}, weight {ws:?}, groups {g}"),
            ));
        }
        let ho = Conv2dCfg::out_len(h, cfg.pad[0] + cfg.pad[1], kh, cfg.dilation.0, cfg.stride.0);
        let wo = Conv2dCfg::out_len(w, cfg.pad[2] + cfg.pad[3], kw, cfg.dilation.1, cfg.stride.1);
        match (ho, wo) {
            (Some(ho), Some(wo)) => Ok(Self {
                n,
                c,
                h,
                w,
                co,
                kh,
                kw,
                ho,
                wo,
                cfg,
            }),
            _ => Err(Error::shape(
                "conv2d",
                format!("kernel {ws:?} with {cfg:?} does not fit input {xs:?}"),
            )),
        }
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.co, self.ho, self.wo]
    }

    fn is_depthwise(&self) -> bool {
        self.cfg.groups == self.c && self.co == self.c
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.cfg.stride == (1, 1) && self.cfg.pad == [0; 4]
    }

    fn cig(&self) -> usize {
        self.c / self.cfg.groups
    }

    fn cog(&self) -> usize {
        self.co / self.cfg.groups
    }

    fn col_rows(&self) -> usize {
        self.cig() * self.kh * self.kw
    }

    /// Range of output positions whose tap `k` lands inside `[0, len)`.
    #[inline]
    fn valid(out: usize, len: usize, pad: usize, off: usize, stride: usize) -> (usize, usize) {
        // input index = o*stride + off - pad
        let lo = if pad > off {
            (pad - off).div_ceil(stride)
        } else {
            0
        };
        let hi = if len + pad > off {
            ((len + pad - off - 1) / stride + 1).min(out)
        } else {
            0
        };
        let lo = lo.min(out);
        (lo, hi.max(lo))
    }
}

pub(crate) fn forward<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.co * g.ho * g.wo];
    if g.is_depthwise() {
        depthwise_forward(x, w, g, &mut out);
    } else {
        gemm_forward(x, w, g, &mut out);
    }
    if let Some(b) = b {
        let plane = g.ho * g.wo;
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = b[i % g.co];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let mut dx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut dw = need.1.then(|| vec![T::zero(); w.len()]);
    let db = need.2.then(|| {
        let plane = g.ho * g.wo;
        let mut db = vec![T::zero(); g.co];
        for (i, chunk) in dy.chunks(plane).enumerate() {
            db[i % g.co] += chunk.iter().copied().sum::<T>();
        }
        db
    });
    if g.is_depthwise() {
        depthwise_backward(x, w, dy, g, dx.as_deref_mut(), dw.as_deref_mut());
    } else {
        gemm_backward(x, w, dy, g, dx.as_deref_mut(), dw.as_deref_mut());
    }
    ConvGrads { dx, dw, db }
}

fn depthwise_forward<T: Real>(x: &[T], w: &[T], g: &ConvGeom, out: &mut [T]) {
    let (sh, sw) = g.cfg.stride;
    let (dh, dw) = g.cfg.dilation;
    let [pt, _, pl, _] = g.cfg.pad;
    let in_plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    for n in 0..g.n {
        for c in 0..g.c {
            let xp = &x[(n * g.c + c) * in_plane..][..in_plane];
            let op = &mut out[(n * g.c + c) * out_plane..][..out_plane];
            let wk = &w[c * g.kh * g.kw..][..g.kh * g.kw];
            for i in 0..g.kh {
                let (ho0, ho1) = ConvGeom::valid(g.ho, g.h, pt, i * dh, sh);
                for j in 0..g.kw {
                    let wv = wk[i * g.kw + j];
                    let (wo0, wo1) = ConvGeom::valid(g.wo, g.w, pl, j * dw, sw);
                    for ho in ho0..ho1 {
                        let hi = ho * sh + i * dh - pt;
                        let xrow = &xp[hi * g.w..][..g.w];
                        let orow = &mut op[ho * g.wo..][..g.wo];
                        if wo0 == wo1 {
                            continue;
                        }
                        if sw == 1 {
                            let xi0 = wo0 + j * dw - pl;
                            for (o, &xv) in orow[wo0..wo1].iter_mut().zip(&xrow[xi0..]) {
                                *o += wv * xv;
                            }
                        } else {
                            for wo in wo0..wo1 {
                                orow[wo] += wv * xrow[wo * sw + j * dw - pl];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dwt: Option<&mut [T]>,
) {
    let (sh, sw) = g.cfg.stride;
    let (dh, dw) = g.cfg.dilation;
    let [pt, _, pl, _] = g.cfg.pad;
    let in_plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    let kk = g.kh * g.kw;
    for n in 0..g.n {
        for c in 0..g.c {
            let xoff = (n * g.c + c) * in_plane;
            let yp = &dy[(n * g.c + c) * out_plane..][..out_plane];
            for i in 0..g.kh {
                let (ho0, ho1) = ConvGeom::valid(g.ho, g.h, pt, i * dh, sh);
                for j in 0..g.kw {
                    let wv = w[c * kk + i * g.kw + j];
                    let (wo0, wo1) = ConvGeom::valid(g.wo, g.w, pl, j * dw, sw);
                    let mut acc = T::zero();
                    for ho in ho0..ho1 {
                        let hi = ho * sh + i * dh - pt;
                        let yrow = &yp[ho * g.wo..][..g.wo];
                        let rbase = xoff + hi * g.w;
                        for wo in wo0..wo1 {
                            let wi = wo * sw + j * dw - pl;
                            let gy = yrow[wo];
                            acc += gy * x[rbase + wi];
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            for wo in wo0..wo1 {
                                let wi = wo * sw + j * dw - pl;
                                dx[rbase + wi] += wv * yrow[wo];
                            }
                        }
                    }
                    if let Some(dwt) = dwt.as_deref_mut() {
                        dwt[c * kk + i * g.kw + j] += acc;
                    }
                }
            }
        }
    }
}

/// Fill `col` (`cig·kh·kw` rows × `ho·wo` columns) for one batch item and group.
fn im2col<T: Real>(xg: &[T], g: &ConvGeom, col: &mut [T]) {
    let (sh, sw) = g.cfg.stride;
    let (dh, dw) = g.cfg.dilation;
    let [pt, _, pl, _] = g.cfg.pad;
    let p = g.ho * g.wo;
    col.iter_mut().for_each(|v| *v = T::zero());
    for ci in 0..g.cig() {
        let xp = &xg[ci * g.h * g.w..][..g.h * g.w];
        for i in 0..g.kh {
            let (ho0, ho1) = ConvGeom::valid(g.ho, g.h, pt, i * dh, sh);
            for j in 0..g.kw {
                let row = &mut col[((ci * g.kh + i) * g.kw + j) * p..][..p];
                let (wo0, wo1) = ConvGeom::valid(g.wo, g.w, pl, j * dw, sw);
                for ho in ho0..ho1 {
                    let hi = ho * sh + i * dh - pt;
                    for wo in wo0..wo1 {
                        row[ho * g.wo + wo] = xp[hi * g.w + wo * sw + j * dw - pl];
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom, dxg: &mut [T]) {
    let (sh, sw) = g.cfg.stride;
    let (dh, dw) = g.cfg.dilation;
    let [pt, _, pl, _] = g.cfg.pad;
    let p = g.ho * g.wo;
    for ci in 0..g.cig() {
        let xp = &mut dxg[ci * g.h * g.w..][..g.h * g.w];
        for i in 0..g.kh {
            let (ho0, ho1) = ConvGeom::valid(g.ho, g.h, pt, i * dh, sh);
            for j in 0..g.kw {
                let row = &col[((ci * g.kh + i) * g.kw + j) * p..][..p];
                let (wo0, wo1) = ConvGeom::valid(g.wo, g.w, pl, j * dw, sw);
                for ho in ho0..ho1 {
                    let hi = ho * sh + i * dh - pt;
                    for wo in wo0..wo1 {
                        xp[hi * g.w + wo * sw + j * dw - pl] += row[ho * g.wo + wo];
                    }
                }
            }
        }
    }
}

fn gemm_forward<T: Real>(x: &[T], w: &[T], g: &ConvGeom, out: &mut [T]) {
    let p = g.ho * g.wo;
    let kdim = g.col_rows();
    let (cig, cog) = (g.cig(), g.cog());
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kdim * p]
    };
    for n in 0..g.n {
        for grp in 0..g.cfg.groups {
            let xg = &x[(n * g.c + grp * cig) * g.h * g.w..][..cig * g.h * g.w];
            let wg = &w[grp * cog * kdim..][..cog * kdim];
            let og = &mut out[(n * g.co + grp * cog) * p..][..cog * p];
            let b: &[T] = if g.is_pointwise() {
                xg
            } else {
                im2col(xg, g, &mut col);
                &col
            };
            T::gemm(
                cog,
                kdim,
                p,
                wg,
                kdim as isize,
                1,
                b,
                p as isize,
                1,
                T::zero(),
                og,
                p as isize,
                1,
            );
        }
    }
}

fn gemm_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let p = g.ho * g.wo;
    let kdim = g.col_rows();
    let (cig, cog) = (g.cig(), g.cog());
    let pointwise = g.is_pointwise();
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); kdim * p]
    };
    let mut dcol = if pointwise || dx.is_none() {
        Vec::new()
    } else {
        vec![T::zero(); kdim * p]
    };
    for n in 0..g.n {
        for grp in 0..g.cfg.groups {
            let xoff = (n * g.c + grp * cig) * g.h * g.w;
            let xg = &x[xoff..][..cig * g.h * g.w];
            let wg = &w[grp * cog * kdim..][..cog * kdim];
            let dyg = &dy[(n * g.co + grp * cog) * p..][..cog * p];
            if let Some(dw) = dw.as_deref_mut() {
                let colref: &[T] = if pointwise {
                    xg
                } else {
                    im2col(xg, g, &mut col);
                    &col
                };
                // dW_g (cog × kdim) += dY_g (cog × p) · colᵀ (p × kdim)
                T::gemm(
                    cog,
                    p,
                    kdim,
                    dyg,
                    p as isize,
                    1,
                    colref,
                    1,
                    p as isize,
                    T::one(),
                    &mut dw[grp * cog * kdim..][..cog * kdim],
                    kdim as isize,
                    1,
                );
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dxg = &mut dx[xoff..][..cig * g.h * g.w];
                if pointwise {
                    T::gemm(
                        kdim,
                        cog,
                        p,
                        wg,
                        1,
                        kdim as isize,
                        dyg,
                        p as isize,
                        1,
                        T::one(),
                        dxg,
                        p as isize,
                        1,
                    );
                } else {
                    T::gemm(
                        kdim,
                        cog,
                        p,
                        wg,
                        1,
                        kdim as isize,
                        dyg,
                        p as isize,
                        1,
                        T::zero(),
                        &mut dcol,
                        p as isize,
                        1,
                    );
                    col2im(&dcol, g, dxg);
                }
            }
        }
    }
}
