//! Multi-head mLSTM layer.
//!
//! `q`, `k`, `v` and the output gate use block-diagonal ("headwise")
//! projections: the width `d` is split into blocks of `proj_block` channels
//! and each block has its own small square matrix. Blocks never straddle a
//! head, so heads stay fully independent. The input and forget gates are
//! one scalar per head, each reading the whole input vector.

use rand::Rng;

use super::{default_heads, mlstm_recurrent, recurrent_sequence, GatingMode};
use crate::error::{Error, Result};
use crate::nn::{small_init, ParamId, ParamStore};
use crate::tensor::{cst, grad_enabled, Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MLstmLayerConfig {
    pub d: usize,
    pub heads: usize,
    pub proj_block: usize,
    pub bias: bool,
    pub mode: GatingMode,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl MLstmLayerConfig {
    pub fn new(d: usize, mode: GatingMode) -> Self {
        let heads = default_heads(d);
        Self {
            d,
            heads,
            proj_block: gcd(d / heads.max(1), 4).max(1),
            bias: true,
            mode,
        }
    }

    pub fn with_heads(mut self, heads: usize) -> Self {
        self.heads = heads;
        if heads > 0 && self.d.is_multiple_of(heads) {
            self.proj_block = gcd(self.d / heads, 4);
        }
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "mLSTM width {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.proj_block == 0 || !self.head_dim().is_multiple_of(self.proj_block) {
            return Err(Error::Config(format!(
                "projection block {} does not tile head width {}",
                self.proj_block,
                self.head_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Headwise {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    block: usize,
}

impl Headwise {
    fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        block: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            small_init(&[d / block, block, block], block, rng),
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[d]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            block,
        })
    }

    /// `x` is `[rows, d]`; the bias is added after `scale`.
    fn apply<T: Float>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        scale: Option<f64>,
    ) -> Result<Tensor<T>> {
        headwise_linear(
            x,
            store.get(self.weight),
            self.bias.map(|b| store.get(b)),
            scale,
            self.block,
        )
    }
}

/// Block-diagonal linear map over the last axis of `x: [rows, d]` with
/// `w: [d / block, block, block]`.
pub fn headwise_linear<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    scale: Option<f64>,
    block: usize,
) -> Result<Tensor<T>> {
    if x.rank() != 2 || block == 0 {
        return Err(Error::shape("headwise_linear", x.shape(), w.shape()));
    }
    let (rows, d) = (x.dim(0), x.dim(1));
    if w.shape() != [d / block, block, block] || d % block != 0 {
        return Err(Error::shape("headwise_linear", x.shape(), w.shape()));
    }
    let (xd, wd) = (x.clone(), w.clone());
    let mut out = vec![T::zero(); rows * d];
    match block {
        4 => blocks_fwd::<T, 4>(x.data(), w.data(), &mut out, d),
        _ => blocks_fwd_dyn(x.data(), w.data(), &mut out, d, block),
    }
    let y = Tensor::from_op(
        "headwise_linear",
        out,
        vec![rows, d],
        vec![x.clone(), w.clone()],
        move |g| {
            let gx = xd.tracks_grad().then(|| {
                let mut gx = vec![T::zero(); rows * d];
                match block {
                    4 => blocks_bwd_input::<T, 4>(g, wd.data(), &mut gx, d),
                    _ => blocks_bwd_input_dyn(g, wd.data(), &mut gx, d, block),
                }
                gx
            });
            let gw = wd.tracks_grad().then(|| {
                let mut gw = vec![T::zero(); d * block];
                match block {
                    4 => blocks_bwd_weight::<T, 4>(xd.data(), g, &mut gw, d),
                    _ => blocks_bwd_weight_dyn(xd.data(), g, &mut gw, d, block),
                }
                gw
            });
            vec![gx, gw]
        },
    );
    let y = match scale {
        Some(s) => y.mul_scalar(cst(s)),
        None => y,
    };
    match bias {
        Some(b) => y.add(b),
        None => Ok(y),
    }
}

fn blocks_fwd<T: Float, const B: usize>(x: &[T], w: &[T], out: &mut [T], d: usize) {
    let wb: Vec<[[T; B]; B]> = w
        .chunks_exact(B * B)
        .map(|c| std::array::from_fn(|i| std::array::from_fn(|j| c[i * B + j])))
        .collect();
    for (xr, yr) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        for ((xb, yb), wm) in xr.chunks_exact(B).zip(yr.chunks_exact_mut(B)).zip(&wb) {
            let mut acc = [T::zero(); B];
            for i in 0..B {
                for j in 0..B {
                    acc[j] += xb[i] * wm[i][j];
                }
            }
            yb.copy_from_slice(&acc);
        }
    }
}

fn blocks_fwd_dyn<T: Float>(x: &[T], w: &[T], out: &mut [T], d: usize, block: usize) {
    for (xr, yr) in x.chunks(d).zip(out.chunks_mut(d)) {
        for ((xb, yb), wb) in xr
            .chunks(block)
            .zip(yr.chunks_mut(block))
            .zip(w.chunks(block * block))
        {
            for (&xv, wrow) in xb.iter().zip(wb.chunks(block)) {
                for (yv, &wv) in yb.iter_mut().zip(wrow) {
                    *yv += xv * wv;
                }
            }
        }
    }
}

fn blocks_bwd_input<T: Float, const B: usize>(g: &[T], w: &[T], gx: &mut [T], d: usize) {
    let wb: Vec<[[T; B]; B]> = w
        .chunks_exact(B * B)
        .map(|c| std::array::from_fn(|i| std::array::from_fn(|j| c[i * B + j])))
        .collect();
    for (gr, gxr) in g.chunks_exact(d).zip(gx.chunks_exact_mut(d)) {
        for ((gb, gxb), wm) in gr.chunks_exact(B).zip(gxr.chunks_exact_mut(B)).zip(&wb) {
            for i in 0..B {
                let mut a = T::zero();
                for j in 0..B {
                    a += gb[j] * wm[i][j];
                }
                gxb[i] = a;
            }
        }
    }
}

fn blocks_bwd_input_dyn<T: Float>(g: &[T], w: &[T], gx: &mut [T], d: usize, block: usize) {
    for (gr, gxr) in g.chunks(d).zip(gx.chunks_mut(d)) {
        for ((gb, gxb), wb) in gr
            .chunks(block)
            .zip(gxr.chunks_mut(block))
            .zip(w.chunks(block * block))
        {
            for (gxv, wrow) in gxb.iter_mut().zip(wb.chunks(block)) {
                *gxv = gb
                    .iter()
                    .zip(wrow)
                    .fold(T::zero(), |a, (&gv, &wv)| a + gv * wv);
            }
        }
    }
}

fn blocks_bwd_weight<T: Float, const B: usize>(x: &[T], g: &[T], gw: &mut [T], d: usize) {
    let mut acc: Vec<[[T; B]; B]> = vec![[[T::zero(); B]; B]; d / B];
    for (xr, gr) in x.chunks_exact(d).zip(g.chunks_exact(d)) {
        for ((xb, gb), am) in xr
            .chunks_exact(B)
            .zip(gr.chunks_exact(B))
            .zip(acc.iter_mut())
        {
            for i in 0..B {
                for j in 0..B {
                    am[i][j] += xb[i] * gb[j];
                }
            }
        }
    }
    for (dst, am) in gw.chunks_exact_mut(B * B).zip(&acc) {
        for i in 0..B {
            dst[i * B..(i + 1) * B].copy_from_slice(&am[i]);
        }
    }
}

fn blocks_bwd_weight_dyn<T: Float>(x: &[T], g: &[T], gw: &mut [T], d: usize, block: usize) {
    for (xr, gr) in x.chunks(d).zip(g.chunks(d)) {
        for ((xb, gb), gwb) in xr
            .chunks(block)
            .zip(gr.chunks(block))
            .zip(gw.chunks_mut(block * block))
        {
            for (&xv, gwrow) in xb.iter().zip(gwb.chunks_mut(block)) {
                for (gwv, &gv) in gwrow.iter_mut().zip(gb) {
                    *gwv += xv * gv;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct MLstmLayer {
    pub cfg: MLstmLayerConfig,
    pub q: Headwise,
    pub k: Headwise,
    pub v: Headwise,
    pub o: Headwise,
    pub igate_w: ParamId,
    pub igate_b: ParamId,
    pub fgate_w: ParamId,
    pub fgate_b: ParamId,
}

impl MLstmLayer {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: MLstmLayerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (d, h, bs) = (cfg.d, cfg.heads, cfg.proj_block);
        let q = Headwise::new(store, &format!("{prefix}.q"), d, bs, cfg.bias, rng)?;
        let k = Headwise::new(store, &format!("{prefix}.k"), d, bs, cfg.bias, rng)?;
        let v = Headwise::new(store, &format!("{prefix}.v"), d, bs, cfg.bias, rng)?;
        let o = Headwise::new(store, &format!("{prefix}.o"), d, bs, cfg.bias, rng)?;
        let igate_w = store.add(format!("{prefix}.igate.weight"), Tensor::zeros(&[d, h]))?;
        let igate_b = store.add(format!("{prefix}.igate.bias"), Tensor::zeros(&[h]))?;
        let fgate_w = store.add(format!("{prefix}.fgate.weight"), Tensor::zeros(&[d, h]))?;
        // slow-forgetting start: sigmoid(f) in [sigmoid(3), sigmoid(6)]; in
        // exponential mode the same forget values are reached via log-sigmoid
        let raw: Tensor<T> = Tensor::uniform(&[h], 3.0, 6.0, rng);
        let fb = match cfg.mode {
            GatingMode::Exponential => raw.log_sigmoid(),
            _ => raw,
        };
        let fgate_b = store.add(format!("{prefix}.fgate.bias"), fb)?;
        Ok(Self {
            cfg,
            q,
            k,
            v,
            o,
            igate_w,
            igate_b,
            fgate_w,
            fgate_b,
        })
    }

    /// Projected streams for `x: [b, t, d]`: `q, k, v, o` as `[b*h, t, dh]`
    /// (with the key scale applied) and gate pre-activations as `[b*h, t]`.
    pub fn streams<T: Float>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Streams<T>> {
        let cfg = &self.cfg;
        if x.rank() != 3 || x.dim(2) != cfg.d {
            return Err(Error::shape("mlstm_layer", x.shape(), &[cfg.d]));
        }
        let (b, t, d, h) = (x.dim(0), x.dim(1), cfg.d, cfg.heads);
        let dh = d / h;
        let rows = x.reshape(&[b * t, d])?;

        let split = |y: Tensor<T>| -> Result<Tensor<T>> {
            y.reshape(&[b, t, h, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b * h, t, dh])
        };
        let gate = |w: ParamId, bias: ParamId| -> Result<Tensor<T>> {
            rows.linear(store.get(w), Some(store.get(bias)))?
                .reshape(&[b, t, h])?
                .permute(&[0, 2, 1])?
                .reshape(&[b * h, t])
        };
        Ok(Streams {
            q: split(self.q.apply(store, &rows, None)?)?,
            k: split(self.k.apply(store, &rows, Some(1.0 / (dh as f64).sqrt()))?)?,
            v: split(self.v.apply(store, &rows, None)?)?,
            o: split(self.o.apply(store, &rows, None)?)?,
            i_pre: gate(self.igate_w, self.igate_b)?,
            f_pre: gate(self.fgate_w, self.fgate_b)?,
        })
    }

    /// `x: [b, t, d]` to `[b, t, d]`.
    ///
    /// Records the differentiable recurrent form while gradients are being
    /// tracked and runs the plain recurrence otherwise.
    pub fn forward<T: Float>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.streams(store, x)?;
        let (b, t, d, h) = (x.dim(0), x.dim(1), self.cfg.d, self.cfg.heads);
        let dh = d / h;
        let all = [&s.q, &s.k, &s.v, &s.o, &s.i_pre, &s.f_pre];
        let tracking = grad_enabled() && all.iter().any(|t| t.tracks_grad());
        let hs = if tracking {
            mlstm_recurrent(&s.q, &s.k, &s.v, &s.i_pre, &s.f_pre, &s.o, self.cfg.mode)?
        } else {
            let data = recurrent_sequence(
                s.q.data(),
                s.k.data(),
                s.v.data(),
                s.i_pre.data(),
                s.f_pre.data(),
                s.o.data(),
                (b * h, t, dh),
                self.cfg.mode,
            )?;
            Tensor::from_vec(data, &[b * h, t, dh])?
        };
        hs.reshape(&[b, h, t, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, t, d])
    }
}

/// Per-head inputs of the cell for a whole batch.
#[derive(Debug, Clone)]
pub struct Streams<T: Float> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub o: Tensor<T>,
    pub i_pre: Tensor<T>,
    pub f_pre: Tensor<T>,
}
