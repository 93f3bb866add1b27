//! Direct (grouped, strided, dilated) convolutions and their transposes.
//!
//! Output sizes follow the usual formulas:
//!
//! * convolution: `out = (in + 2*pad - dil*(k - 1) - 1) / stride + 1`
//! * transposed:  `out = (in - 1)*stride - 2*pad + dil*(k - 1) + 1`
//!
//! The transposed convolution is implemented as the adjoint of the forward
//! convolution with respect to its input, so the three raw kernels below
//! (forward, input-adjoint, weight-adjoint) serve both ops.

use rayon::prelude::*;

use super::{Float, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dGeom {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv1dGeom {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl From<Conv1dGeom> for Conv2dGeom {
    fn from(g: Conv1dGeom) -> Self {
        Conv2dGeom {
            stride: (1, g.stride),
            padding: (0, g.padding),
            dilation: (1, g.dilation),
            groups: g.groups,
        }
    }
}

pub fn conv_out_len(
    input: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dil: usize,
) -> Option<usize> {
    let span = dil * (k - 1) + 1;
    (input + 2 * pad >= span && stride > 0).then(|| (input + 2 * pad - span) / stride + 1)
}

pub fn conv_transpose_out_len(
    input: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dil: usize,
) -> Option<usize> {
    let full = (input - 1) * stride + dil * (k - 1) + 1;
    (full > 2 * pad).then(|| full - 2 * pad)
}

/// Geometry of the underlying forward convolution.
#[derive(Debug, Clone, Copy)]
struct Dims {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    g: Conv2dGeom,
}

impl Dims {
    fn cin_g(&self) -> usize {
        self.cin / self.g.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.g.groups
    }
}

/// Output positions `o` in `[lo, hi)` for which `o*s + k*d - p` lands in `[0, n)`.
#[inline]
fn valid_range(n: usize, out: usize, s: usize, p: usize, d: usize, k: usize) -> (usize, usize) {
    let off = (k * d) as isize - p as isize;
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(s)
    };
    let last = n as isize - 1 - off;
    if last < 0 {
        return (0, 0);
    }
    let hi = ((last as usize) / s + 1).min(out);
    (lo.min(hi), hi)
}

/// `y[i] += a * x[start + i * stride]`.
#[inline]
fn axpy<T: Float>(y: &mut [T], x: &[T], a: T, start: usize, stride: usize) {
    if stride == 1 {
        let n = y.len();
        for (yv, &xv) in y.iter_mut().zip(&x[start..start + n]) {
            *yv += a * xv;
        }
    } else {
        for (i, yv) in y.iter_mut().enumerate() {
            *yv += a * x[start + i * stride];
        }
    }
}

/// `x[start + i * stride] += a * g[i]`.
#[inline]
fn scatter_axpy<T: Float>(x: &mut [T], g: &[T], a: T, start: usize, stride: usize) {
    if stride == 1 {
        for (xv, &gv) in x[start..start + g.len()].iter_mut().zip(g) {
            *xv += a * gv;
        }
    } else {
        for (i, &gv) in g.iter().enumerate() {
            x[start + i * stride] += a * gv;
        }
    }
}

/// `sum_i g[i] * x[start + i * stride]` with eight fixed partial sums.
#[inline]
fn dot<T: Float>(g: &[T], x: &[T], start: usize, stride: usize) -> T {
    if stride != 1 {
        return g
            .iter()
            .enumerate()
            .fold(T::zero(), |acc, (i, &gv)| acc + gv * x[start + i * stride]);
    }
    let x = &x[start..start + g.len()];
    let mut lanes = [T::zero(); 8];
    let (gc, xc) = (g.chunks_exact(8), x.chunks_exact(8));
    let (gr, xr) = (gc.remainder(), xc.remainder());
    for (a, b) in gc.zip(xc) {
        for l in 0..8 {
            lanes[l] += a[l] * b[l];
        }
    }
    let mut acc = lanes.iter().fold(T::zero(), |s, &v| s + v);
    for (a, b) in gr.iter().zip(xr) {
        acc += *a * *b;
    }
    acc
}

fn conv_fwd<T: Float>(x: &[T], w: &[T], d: Dims) -> Vec<T> {
    let (cin_g, cout_g) = (d.cin_g(), d.cout_g());
    let plane = d.ho * d.wo;
    let mut y = vec![T::zero(); d.b * d.cout * plane];
    let (sh, sw) = d.g.stride;
    let (ph, pw) = d.g.padding;
    let (dh, dw) = d.g.dilation;
    y.par_chunks_mut(plane).enumerate().for_each(|(idx, yo)| {
        let (b, co) = (idx / d.cout, idx % d.cout);
        let grp = co / cout_g;
        for cil in 0..cin_g {
            let ci = grp * cin_g + cil;
            let xp = &x[(b * d.cin + ci) * d.h * d.w..][..d.h * d.w];
            for kh in 0..d.kh {
                let (oh0, oh1) = valid_range(d.h, d.ho, sh, ph, dh, kh);
                for kw in 0..d.kw {
                    let wv = w[((co * cin_g + cil) * d.kh + kh) * d.kw + kw];
                    if wv.is_zero() {
                        continue;
                    }
                    let (ow0, ow1) = valid_range(d.w, d.wo, sw, pw, dw, kw);
                    for oh in oh0..oh1 {
                        let ih = oh * sh + kh * dh - ph;
                        let xr = &xp[ih * d.w..(ih + 1) * d.w];
                        let yr = &mut yo[oh * d.wo..(oh + 1) * d.wo];
                        axpy(&mut yr[ow0..ow1], xr, wv, ow0 * sw + kw * dw - pw, sw);
                    }
                }
            }
        }
    });
    y
}

fn conv_bwd_input<T: Float>(gy: &[T], w: &[T], d: Dims) -> Vec<T> {
    let (cin_g, cout_g) = (d.cin_g(), d.cout_g());
    let plane = d.h * d.w;
    let mut gx = vec![T::zero(); d.b * d.cin * plane];
    let (sh, sw) = d.g.stride;
    let (ph, pw) = d.g.padding;
    let (dh, dw) = d.g.dilation;
    gx.par_chunks_mut(plane).enumerate().for_each(|(idx, gxp)| {
        let (b, ci) = (idx / d.cin, idx % d.cin);
        let (grp, cil) = (ci / cin_g, ci % cin_g);
        for co in grp * cout_g..(grp + 1) * cout_g {
            let gp = &gy[(b * d.cout + co) * d.ho * d.wo..][..d.ho * d.wo];
            for kh in 0..d.kh {
                let (oh0, oh1) = valid_range(d.h, d.ho, sh, ph, dh, kh);
                for kw in 0..d.kw {
                    let wv = w[((co * cin_g + cil) * d.kh + kh) * d.kw + kw];
                    if wv.is_zero() {
                        continue;
                    }
                    let (ow0, ow1) = valid_range(d.w, d.wo, sw, pw, dw, kw);
                    for oh in oh0..oh1 {
                        let ih = oh * sh + kh * dh - ph;
                        let gr = &gp[oh * d.wo..(oh + 1) * d.wo];
                        let xr = &mut gxp[ih * d.w..(ih + 1) * d.w];
                        scatter_axpy(xr, &gr[ow0..ow1], wv, ow0 * sw + kw * dw - pw, sw);
                    }
                }
            }
        }
    });
    gx
}

fn conv_bwd_weight<T: Float>(gy: &[T], x: &[T], d: Dims) -> Vec<T> {
    let (cin_g, cout_g) = (d.cin_g(), d.cout_g());
    let per_co = cin_g * d.kh * d.kw;
    let mut gw = vec![T::zero(); d.cout * per_co];
    let (sh, sw) = d.g.stride;
    let (ph, pw) = d.g.padding;
    let (dh, dw) = d.g.dilation;
    gw.par_chunks_mut(per_co).enumerate().for_each(|(co, gwc)| {
        let grp = co / cout_g;
        for cil in 0..cin_g {
            let ci = grp * cin_g + cil;
            for kh in 0..d.kh {
                let (oh0, oh1) = valid_range(d.h, d.ho, sh, ph, dh, kh);
                for kw in 0..d.kw {
                    let (ow0, ow1) = valid_range(d.w, d.wo, sw, pw, dw, kw);
                    let mut acc = T::zero();
                    for b in 0..d.b {
                        let gp = &gy[(b * d.cout + co) * d.ho * d.wo..][..d.ho * d.wo];
                        let xp = &x[(b * d.cin + ci) * d.h * d.w..][..d.h * d.w];
                        for oh in oh0..oh1 {
                            let ih = oh * sh + kh * dh - ph;
                            let gr = &gp[oh * d.wo..(oh + 1) * d.wo];
                            let xr = &xp[ih * d.w..(ih + 1) * d.w];
                            acc += dot(&gr[ow0..ow1], xr, ow0 * sw + kw * dw - pw, sw);
                        }
                    }
                    gwc[(cil * d.kh + kh) * d.kw + kw] = acc;
                }
            }
        }
    });
    gw
}

fn add_channel_bias<T: Float>(y: &mut [T], bias: &[T], channels: usize, plane: usize) {
    for (i, chunk) in y.chunks_mut(plane).enumerate() {
        let b = bias[i % channels];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_bias_grad<T: Float>(g: &[T], channels: usize, plane: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); channels];
    for (i, chunk) in g.chunks(plane).enumerate() {
        gb[i % channels] += chunk.iter().copied().sum();
    }
    gb
}

fn check_common(
    x: &Tensor<impl Float>,
    w: &Tensor<impl Float>,
    geom: &Conv2dGeom,
    op: &'static str,
) -> Result<()> {
    if x.rank() != 4 || w.rank() != 4 {
        return Err(Error::shape(op, x.shape(), w.shape()));
    }
    let ok = geom.groups >= 1
        && geom.stride.0 >= 1
        && geom.stride.1 >= 1
        && geom.dilation.0 >= 1
        && geom.dilation.1 >= 1;
    if !ok {
        return Err(Error::Geometry(format!(
            "{op}: stride, dilation and groups must be >= 1"
        )));
    }
    Ok(())
}

impl<T: Float> Tensor<T> {
    /// 2-D convolution of `[B, Cin, H, W]` with weight `[Cout, Cin/groups, KH, KW]`.
    pub fn conv2d(
        &self,
        w: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        geom: Conv2dGeom,
    ) -> Result<Tensor<T>> {
        check_common(self, w, &geom, "conv2d")?;
        let [b, cin, h, wd] = [self.dim(0), self.dim(1), self.dim(2), self.dim(3)];
        let [cout, cin_g, kh, kw] = [w.dim(0), w.dim(1), w.dim(2), w.dim(3)];
        if cin % geom.groups != 0 || cout % geom.groups != 0 || cin_g * geom.groups != cin {
            return Err(Error::shape("conv2d", self.shape(), w.shape()));
        }
        if let Some(bb) = bias {
            if bb.shape() != [cout] {
                return Err(Error::shape("conv2d bias", bb.shape(), &[cout]));
            }
        }
        let ho = conv_out_len(h, kh, geom.stride.0, geom.padding.0, geom.dilation.0);
        let wo = conv_out_len(wd, kw, geom.stride.1, geom.padding.1, geom.dilation.1);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(Error::Geometry(format!(
                "conv2d output would be empty for input {:?}, kernel {:?}, {geom:?}",
                self.shape(),
                w.shape()
            )));
        };
        let d = Dims {
            b,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            ho,
            wo,
            g: geom,
        };
        let mut y = conv_fwd(self.data(), w.data(), d);
        if let Some(bb) = bias {
            add_channel_bias(&mut y, bb.data(), cout, ho * wo);
        }
        let (x, wt) = (self.clone(), w.clone());
        let has_bias = bias.is_some();
        let mut inputs = vec![self.clone(), w.clone()];
        inputs.extend(bias.cloned());
        Ok(Tensor::from_op(
            "conv2d",
            y,
            vec![b, cout, ho, wo],
            inputs,
            move |g| {
                let mut out = vec![
                    x.tracks_grad().then(|| conv_bwd_input(g, wt.data(), d)),
                    wt.tracks_grad().then(|| conv_bwd_weight(g, x.data(), d)),
                ];
                if has_bias {
                    out.push(Some(channel_bias_grad(g, cout, ho * wo)));
                }
                out
            },
        ))
    }

    /// Transposed 2-D convolution of `[B, Cin, H, W]` with weight
    /// `[Cin, Cout/groups, KH, KW]`.
    pub fn conv_transpose2d(
        &self,
        w: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        geom: Conv2dGeom,
    ) -> Result<Tensor<T>> {
        check_common(self, w, &geom, "conv_transpose2d")?;
        let [b, cin_t, h, wd] = [self.dim(0), self.dim(1), self.dim(2), self.dim(3)];
        let [wc, cout_g, kh, kw] = [w.dim(0), w.dim(1), w.dim(2), w.dim(3)];
        if wc != cin_t || cin_t % geom.groups != 0 {
            return Err(Error::shape("conv_transpose2d", self.shape(), w.shape()));
        }
        let cout_t = cout_g * geom.groups;
        if let Some(bb) = bias {
            if bb.shape() != [cout_t] {
                return Err(Error::shape("conv_transpose2d bias", bb.shape(), &[cout_t]));
            }
        }
        let ho = conv_transpose_out_len(h, kh, geom.stride.0, geom.padding.0, geom.dilation.0);
        let wo = conv_transpose_out_len(wd, kw, geom.stride.1, geom.padding.1, geom.dilation.1);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(Error::Geometry(format!(
                "conv_transpose2d output would be empty for input {:?}, kernel {:?}, {geom:?}",
                self.shape(),
                w.shape()
            )));
        };
        // adjoint of a forward conv mapping [cout_t, ho, wo] -> [cin_t, h, wd]
        let d = Dims {
            b,
            cin: cout_t,
            h: ho,
            w: wo,
            cout: cin_t,
            kh,
            kw,
            ho: h,
            wo: wd,
            g: geom,
        };
        let mut y = conv_bwd_input(self.data(), w.data(), d);
        if let Some(bb) = bias {
            add_channel_bias(&mut y, bb.data(), cout_t, ho * wo);
        }
        let (x, wt) = (self.clone(), w.clone());
        let has_bias = bias.is_some();
        let mut inputs = vec![self.clone(), w.clone()];
        inputs.extend(bias.cloned());
        Ok(Tensor::from_op(
            "conv_transpose2d",
            y,
            vec![b, cout_t, ho, wo],
            inputs,
            move |g| {
                let mut out = vec![
                    x.tracks_grad().then(|| conv_fwd(g, wt.data(), d)),
                    wt.tracks_grad().then(|| conv_bwd_weight(x.data(), g, d)),
                ];
                if has_bias {
                    out.push(Some(channel_bias_grad(g, cout_t, ho * wo)));
                }
                out
            },
        ))
    }

    /// 1-D convolution of `[B, Cin, L]` with weight `[Cout, Cin/groups, K]`.
    pub fn conv1d(
        &self,
        w: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        geom: Conv1dGeom,
    ) -> Result<Tensor<T>> {
        if self.rank() != 3 || w.rank() != 3 {
            return Err(Error::shape("conv1d", self.shape(), w.shape()));
        }
        let x4 = self.unsqueeze(2)?;
        let w4 = w.unsqueeze(2)?;
        let y = x4.conv2d(&w4, bias, geom.into())?;
        y.reshape(&[y.dim(0), y.dim(1), y.dim(3)])
    }

    /// Transposed 1-D convolution of `[B, Cin, L]` with weight `[Cin, Cout/groups, K]`.
    pub fn conv_transpose1d(
        &self,
        w: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        geom: Conv1dGeom,
    ) -> Result<Tensor<T>> {
        if self.rank() != 3 || w.rank() != 3 {
            return Err(Error::shape("conv_transpose1d", self.shape(), w.shape()));
        }
        let x4 = self.unsqueeze(2)?;
        let w4 = w.unsqueeze(2)?;
        let y = x4.conv_transpose2d(&w4, bias, geom.into())?;
        y.reshape(&[y.dim(0), y.dim(1), y.dim(3)])
    }
}
