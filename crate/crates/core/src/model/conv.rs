//! Convolutional feature encoder, dilated DenseNet and the two decoders.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{fan_in_uniform, ParamId, ParamStore};
use crate::tensor::norm::instance_norm;
use crate::tensor::{Conv2dGeom, Float, Tensor};

pub const IN_EPS: f64 = 1e-5;
pub const PRELU_INIT: f64 = 0.2;

/// Conv2d weight + bias with the default fan-in uniform init.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: Conv2dGeom,
    pub transposed: bool,
}

impl Conv {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        (cin, cout): (usize, usize),
        (kh, kw): (usize, usize),
        geom: Conv2dGeom,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = cin * kh * kw;
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform(&[cout, cin, kh, kw], fan_in, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), fan_in_uniform(&[cout], fan_in, rng))?;
        Ok(Self {
            weight,
            bias,
            geom,
            transposed: false,
        })
    }

    pub fn new_transposed<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        (cin, cout): (usize, usize),
        (kh, kw): (usize, usize),
        geom: Conv2dGeom,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = cout * kh * kw;
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform(&[cin, cout, kh, kw], fan_in, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), fan_in_uniform(&[cout], fan_in, rng))?;
        Ok(Self {
            weight,
            bias,
            geom,
            transposed: true,
        })
    }

    pub fn forward<T: Float>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (w, b) = (store.get(self.weight), Some(store.get(self.bias)));
        if self.transposed {
            x.conv_transpose2d(w, b, self.geom)
        } else {
            x.conv2d(w, b, self.geom)
        }
    }
}

/// Instance norm (optional) followed by a per-channel PReLU.
#[derive(Debug, Clone)]
pub struct NormAct {
    pub norm: Option<(ParamId, ParamId)>,
    pub slope: ParamId,
}

impl NormAct {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        norm: bool,
    ) -> Result<Self> {
        let norm = if norm {
            Some((
                store.add(format!("{name}.norm.weight"), Tensor::ones(&[c]))?,
                store.add(format!("{name}.norm.bias"), Tensor::zeros(&[c]))?,
            ))
        } else {
            None
        };
        let slope = store.add(
            format!("{name}.act.slope"),
            Tensor::full(&[c], T::of_f64(PRELU_INIT)),
        )?;
        Ok(Self { norm, slope })
    }

    pub fn forward<T: Float>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = match self.norm {
            Some((g, b)) => instance_norm(x, store.get(g), store.get(b), IN_EPS)?,
            None => x.clone(),
        };
        y.prelu(store.get(self.slope))
    }
}

/// Dense stack of 3x3 convolutions; layer `i` sees the concatenation of the
/// block input and all earlier layer outputs and is dilated by `2^i` along
/// time. A 1x1 convolution fuses the full concatenation back to `c`
/// channels. Time receptive field: `1 + 2 * (2^depth - 1)` frames.
#[derive(Debug, Clone)]
pub struct DenseBlock {
    pub layers: Vec<(Conv, NormAct)>,
    pub fuse: Conv,
}

impl DenseBlock {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        depth: usize,
        norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let dil = 1 << i;
            let geom = Conv2dGeom {
                padding: (dil, 1),
                dilation: (dil, 1),
                ..Default::default()
            };
            let conv = Conv::new(
                store,
                &format!("{name}.{i}.conv"),
                (c * (i + 1), c),
                (3, 3),
                geom,
                rng,
            )?;
            let act = NormAct::new(store, &format!("{name}.{i}"), c, norm)?;
            layers.push((conv, act));
        }
        let fuse = Conv::new(
            store,
            &format!("{name}.fuse"),
            (c * (depth + 1), c),
            (1, 1),
            Conv2dGeom::default(),
            rng,
        )?;
        Ok(Self { layers, fuse })
    }

    pub fn receptive_field(&self) -> usize {
        1 + 2 * ((1usize << self.layers.len()) - 1)
    }

    pub fn forward<T: Float>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut parts = vec![x.clone()];
        for (conv, act) in &self.layers {
            let inp = if parts.len() == 1 {
                x.clone()
            } else {
                Tensor::concat(&parts, 1)?
            };
            parts.push(act.forward(store, &conv.forward(store, &inp)?)?);
        }
        self.fuse.forward(store, &Tensor::concat(&parts, 1)?)
    }
}

fn halving_geom() -> Conv2dGeom {
    Conv2dGeom {
        stride: (1, 2),
        padding: (0, 1),
        ..Default::default()
    }
}

/// Frequency bins after the stride-2 convolution: `floor((f - 1) / 2) + 1`.
pub fn halved_freq(f: usize) -> usize {
    (f - 1) / 2 + 1
}

/// `[B, 2, T, F]` to `[B, C, T, F']`.
#[derive(Debug, Clone)]
pub struct FeatureEncoder {
    pub inp: Conv,
    pub inp_act: NormAct,
    pub dense: DenseBlock,
    pub down: Conv,
    pub down_act: NormAct,
}

impl FeatureEncoder {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        c: usize,
        depth: usize,
        norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            inp: Conv::new(
                store,
                "encoder.inp.conv",
                (2, c),
                (1, 1),
                Conv2dGeom::default(),
                rng,
            )?,
            inp_act: NormAct::new(store, "encoder.inp", c, norm)?,
            dense: DenseBlock::new(store, "encoder.dense", c, depth, norm, rng)?,
            down: Conv::new(
                store,
                "encoder.down.conv",
                (c, c),
                (1, 3),
                halving_geom(),
                rng,
            )?,
            down_act: NormAct::new(store, "encoder.down", c, norm)?,
        })
    }

    pub fn forward<T: Float>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 4 || x.dim(1) != 2 || x.dim(3) < 2 {
            return Err(Error::Geometry(format!(
                "encoder expects [B, 2, T, F] with F >= 2, got {:?}",
                x.shape()
            )));
        }
        let y = self.inp_act.forward(store, &self.inp.forward(store, x)?)?;
        let y = self.dense.forward(store, &y)?;
        self.down_act.forward(store, &self.down.forward(store, &y)?)
    }
}

fn upsample<T: Float, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    c: usize,
    rng: &mut R,
) -> Result<Conv> {
    Conv::new_transposed(store, name, (c, c), (1, 3), halving_geom(), rng)
}

/// The transposed convolution maps `f'` bins to `2 * f' - 1`, which is the
/// original count for odd `f`.
fn restore_freq<T: Float>(x: &Tensor<T>, f: usize) -> Result<Tensor<T>> {
    if x.dim(3) != f {
        return Err(Error::Geometry(format!(
            "decoder produced {} bins, expected {f}",
            x.dim(3)
        )));
    }
    Ok(x.clone())
}

/// Features to a compressed-magnitude mask in `(0, beta)`, `[B, T, F]`.
#[derive(Debug, Clone)]
pub struct MaskDecoder {
    pub dense: DenseBlock,
    pub up: Conv,
    pub reduce: Conv,
    pub reduce_act: NormAct,
    pub out: Conv,
    /// Per-bin slope of the learnable sigmoid.
    pub alpha: ParamId,
    pub beta: f64,
    pub n_freq: usize,
}

impl MaskDecoder {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        c: usize,
        depth: usize,
        n_freq: usize,
        beta: f64,
        norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            dense: DenseBlock::new(store, "mask.dense", c, depth, norm, rng)?,
            up: upsample(store, "mask.up", c, rng)?,
            reduce: Conv::new(
                store,
                "mask.reduce.conv",
                (c, 1),
                (1, 1),
                Conv2dGeom::default(),
                rng,
            )?,
            reduce_act: NormAct::new(store, "mask.reduce", 1, norm)?,
            out: Conv::new(
                store,
                "mask.out",
                (1, 1),
                (1, 1),
                Conv2dGeom::default(),
                rng,
            )?,
            alpha: store.add("mask.sigmoid.alpha", Tensor::ones(&[n_freq]))?,
            beta,
            n_freq,
        })
    }

    /// Mask pre-activation `[B, T, F]`, before the learnable sigmoid.
    pub fn pre_activation<T: Float>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let y = self.dense.forward(store, x)?;
        let y = restore_freq(&self.up.forward(store, &y)?, self.n_freq)?;
        let y = self
            .reduce_act
            .forward(store, &self.reduce.forward(store, &y)?)?;
        let y = self.out.forward(store, &y)?;
        y.reshape(&[y.dim(0), y.dim(2), y.dim(3)])
    }

    pub fn forward<T: Float>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        learnable_sigmoid(
            &self.pre_activation(store, x)?,
            store.get(self.alpha),
            self.beta,
        )
    }
}

/// `beta * sigmoid(alpha_f * x)` with `alpha` broadcast over the last axis.
pub fn learnable_sigmoid<T: Float>(
    x: &Tensor<T>,
    alpha: &Tensor<T>,
    beta: f64,
) -> Result<Tensor<T>> {
    Ok(x.mul(alpha)?.sigmoid().mul_scalar(T::of_f64(beta)))
}

/// Features to a wrapped phase in `(-pi, pi]`, `[B, T, F]`.
#[derive(Debug, Clone)]
pub struct PhaseDecoder {
    pub dense: DenseBlock,
    pub up: Conv,
    pub up_act: NormAct,
    pub real: Conv,
    pub imag: Conv,
    pub n_freq: usize,
}

impl PhaseDecoder {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        c: usize,
        depth: usize,
        n_freq: usize,
        norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            dense: DenseBlock::new(store, "phase.dense", c, depth, norm, rng)?,
            up: upsample(store, "phase.up", c, rng)?,
            up_act: NormAct::new(store, "phase.up", c, norm)?,
            real: Conv::new(
                store,
                "phase.real",
                (c, 1),
                (1, 1),
                Conv2dGeom::default(),
                rng,
            )?,
            imag: Conv::new(
                store,
                "phase.imag",
                (c, 1),
                (1, 1),
                Conv2dGeom::default(),
                rng,
            )?,
            n_freq,
        })
    }

    /// Pseudo real and imaginary parts, each `[B, T, F]`.
    pub fn components<T: Float>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let y = self.dense.forward(store, x)?;
        let y = restore_freq(&self.up.forward(store, &y)?, self.n_freq)?;
        let y = self.up_act.forward(store, &y)?;
        let squeeze = |t: Tensor<T>| t.reshape(&[t.dim(0), t.dim(2), t.dim(3)]);
        Ok((
            squeeze(self.real.forward(store, &y)?)?,
            squeeze(self.imag.forward(store, &y)?)?,
        ))
    }

    pub fn forward<T: Float>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (r, i) = self.components(store, x)?;
        i.atan2(&r)
    }
}
