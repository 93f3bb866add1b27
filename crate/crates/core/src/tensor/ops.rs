//! Elementwise arithmetic, activations and reductions.

use super::broadcast::{broadcast_shape, broadcast_strides, for_each_pair, reduce_to};
use super::{cst, Float, Tensor};
use crate::error::{Error, Result};

impl<T: Float> Tensor<T> {
    fn binary<F, D>(&self, other: &Tensor<T>, name: &'static str, f: F, df: D) -> Result<Tensor<T>>
    where
        F: Fn(T, T) -> T,
        D: Fn(T, T, T) -> (T, T) + Send + Sync + 'static,
    {
        let (sa, sb) = (self.shape(), other.shape());
        if sa == sb {
            let data: Vec<T> = self
                .data()
                .iter()
                .zip(other.data())
                .map(|(&a, &b)| f(a, b))
                .collect();
            let (a, b) = (self.clone(), other.clone());
            let out = data.clone();
            return Ok(Tensor::from_op(
                name,
                data,
                sa.to_vec(),
                vec![self.clone(), other.clone()],
                move |g| {
                    let n = g.len();
                    let (mut ga, mut gb) = (vec![T::zero(); n], vec![T::zero(); n]);
                    let (ad, bd) = (a.data(), b.data());
                    for i in 0..n {
                        let (da, db) = df(ad[i], bd[i], out[i]);
                        ga[i] = g[i] * da;
                        gb[i] = g[i] * db;
                    }
                    vec![a.tracks_grad().then_some(ga), b.tracks_grad().then_some(gb)]
                },
            ));
        }
        let shape = broadcast_shape(sa, sb)?;
        let stride_a = broadcast_strides(sa, &shape);
        let stride_b = broadcast_strides(sb, &shape);
        let n = super::numel_of(&shape);
        let mut data = vec![T::zero(); n];
        let (da_, db_) = (self.data(), other.data());
        for_each_pair(&shape, &stride_a, &stride_b, |o, i, j| {
            data[o] = f(da_[i], db_[j])
        });
        let (a, b) = (self.clone(), other.clone());
        let out = data.clone();
        let oshape = shape.clone();
        Ok(Tensor::from_op(
            name,
            data,
            shape,
            vec![self.clone(), other.clone()],
            move |g| {
                let (mut ga, mut gb) = (vec![T::zero(); g.len()], vec![T::zero(); g.len()]);
                let (ad, bd) = (a.data(), b.data());
                for_each_pair(&oshape, &stride_a, &stride_b, |o, i, j| {
                    let (da, db) = df(ad[i], bd[j], out[o]);
                    ga[o] = g[o] * da;
                    gb[o] = g[o] * db;
                });
                vec![
                    a.tracks_grad().then(|| reduce_to(&ga, &oshape, a.shape())),
                    b.tracks_grad().then(|| reduce_to(&gb, &oshape, b.shape())),
                ]
            },
        ))
    }

    fn unary<D>(&self, name: &'static str, f: impl Fn(T) -> T, df: D) -> Tensor<T>
    where
        D: Fn(T, T) -> T + Send + Sync + 'static,
    {
        let data: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        let x = self.clone();
        let out = data.clone();
        Tensor::from_op(
            name,
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            move |g| {
                vec![Some(
                    g.iter()
                        .zip(x.data())
                        .zip(&out)
                        .map(|((&g, &x), &y)| g * df(x, y))
                        .collect(),
                )]
            },
        )
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "add", |a, b| a + b, |_, _, _| (T::one(), T::one()))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "sub", |a, b| a - b, |_, _, _| (T::one(), -T::one()))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "mul", |a, b| a * b, |a, b, _| (b, a))
    }

    /// Elementwise division; a zero denominator is a numeric error.
    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if other.data().iter().any(|v| v.is_zero()) {
            return Err(Error::Numeric("division by zero".into()));
        }
        self.binary(other, "div", |a, b| a / b, |_, b, y| (b.recip(), -y / b))
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(
            other,
            "maximum",
            |a, b| if a >= b { a } else { b },
            |a, b, _| {
                if a >= b {
                    (T::one(), T::zero())
                } else {
                    (T::zero(), T::one())
                }
            },
        )
    }

    /// `atan2(self, x)` on the principal branch (-pi, pi]; `atan2(0, 0) = 0`.
    pub fn atan2(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(x, "atan2", atan2_principal, |y, x, _| {
            let r2 = x * x + y * y;
            if r2.is_zero() {
                (T::zero(), T::zero())
            } else {
                (x / r2, -y / r2)
            }
        })
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary("neg", |x| -x, |_, _| -T::one())
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        self.unary("add_scalar", |x| x + s, |_, _| T::one())
    }

    pub fn mul_scalar(&self, s: T) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| x * s).collect();
        Tensor::from_op(
            "mul_scalar",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            move |g| vec![Some(g.iter().map(|&g| g * s).collect())],
        )
    }

    /// `max(x, s)`; the gradient flows only where `x > s`.
    pub fn max_scalar(&self, s: T) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| x.max(s)).collect();
        let x = self.clone();
        Tensor::from_op(
            "max_scalar",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            move |g| {
                vec![Some(
                    g.iter()
                        .zip(x.data())
                        .map(|(&g, &x)| if x > s { g } else { T::zero() })
                        .collect(),
                )]
            },
        )
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    /// Natural log; non-positive input is a numeric error.
    pub fn log(&self) -> Result<Tensor<T>> {
        if self.data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::Numeric("log of non-positive value".into()));
        }
        Ok(self.unary("log", |x| x.ln(), |x, _| x.recip()))
    }

    pub fn sqrt(&self) -> Result<Tensor<T>> {
        if self.data().iter().any(|&v| v < T::zero()) {
            return Err(Error::Numeric("sqrt of negative value".into()));
        }
        Ok(self.unary("sqrt", |x| x.sqrt(), |_, y| cst::<T>(0.5) / y))
    }

    /// `x^p` for non-negative `x`. The gradient at zero is taken as zero.
    pub fn powf(&self, p: f64) -> Result<Tensor<T>> {
        if self.data().iter().any(|&v| v < T::zero()) {
            return Err(Error::Contract("powf expects non-negative input".into()));
        }
        let pt = cst::<T>(p);
        let data: Vec<T> = self.data().iter().map(|&x| x.powf(pt)).collect();
        let x = self.clone();
        Ok(Tensor::from_op(
            "powf",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            move |g| {
                vec![Some(
                    g.iter()
                        .zip(x.data())
                        .map(|(&g, &x)| {
                            if x.is_zero() {
                                T::zero()
                            } else {
                                g * pt * x.powf(pt - T::one())
                            }
                        })
                        .collect(),
                )]
            },
        ))
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }

    pub fn abs(&self) -> Tensor<T> {
        self.unary("abs", |x| x.abs(), |x, _| sign(x))
    }

    pub fn sin(&self) -> Tensor<T> {
        self.unary("sin", |x| x.sin(), |x, _| x.cos())
    }

    pub fn cos(&self) -> Tensor<T> {
        self.unary("cos", |x| x.cos(), |x, _| -x.sin())
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary("sigmoid", sigmoid, |_, y| y * (T::one() - y))
    }

    /// `log(sigmoid(x))`, evaluated without overflow.
    pub fn log_sigmoid(&self) -> Tensor<T> {
        self.unary("log_sigmoid", log_sigmoid, |x, _| sigmoid(-x))
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.unary("tanh", |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn silu(&self) -> Tensor<T> {
        self.unary(
            "silu",
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    /// Distance to the nearest multiple of `2*pi`: `|d - 2*pi*round(d / 2*pi)|`.
    pub fn anti_wrap(&self) -> Tensor<T> {
        self.unary("anti_wrap", anti_wrap, |x, _| sign(wrap_residual(x)))
    }

    /// PReLU with one slope per channel along axis 1.
    pub fn prelu(&self, slope: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() < 2 || slope.rank() != 1 || slope.dim(0) != self.dim(1) {
            return Err(Error::shape("prelu", self.shape(), slope.shape()));
        }
        let c = self.dim(1);
        let inner: usize = self.shape()[2..].iter().product();
        let ch = move |i: usize| (i / inner) % c;
        let a = slope.data();
        let data: Vec<T> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| if x >= T::zero() { x } else { a[ch(i)] * x })
            .collect();
        let (x, s) = (self.clone(), slope.clone());
        Ok(Tensor::from_op(
            "prelu",
            data,
            self.shape().to_vec(),
            vec![self.clone(), slope.clone()],
            move |g| {
                let (xd, sd) = (x.data(), s.data());
                let gx = g
                    .iter()
                    .zip(xd)
                    .enumerate()
                    .map(|(i, (&g, &x))| if x >= T::zero() { g } else { g * sd[ch(i)] })
                    .collect();
                let mut gs = vec![T::zero(); c];
                for (i, (&g, &x)) in g.iter().zip(xd).enumerate() {
                    if x < T::zero() {
                        gs[ch(i)] += g * x;
                    }
                }
                vec![Some(gx), s.tracks_grad().then_some(gs)]
            },
        ))
    }

    fn keepdim_shape(&self, axes: &[usize]) -> Result<Vec<usize>> {
        if axes.is_empty() {
            return Err(Error::Contract("reduction needs at least one axis".into()));
        }
        let mut shape = self.shape().to_vec();
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::Contract(format!(
                    "axis {a} out of range for rank {}",
                    shape.len()
                )));
            }
            shape[a] = 1;
        }
        Ok(shape)
    }

    fn finish_reduce(shape: Vec<usize>, axes: &[usize], keepdim: bool) -> Vec<usize> {
        if keepdim {
            return shape;
        }
        let s: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        if s.is_empty() {
            vec![1]
        } else {
            s
        }
    }

    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor<T>> {
        let kshape = self.keepdim_shape(axes)?;
        let in_shape = self.shape().to_vec();
        let s_in = broadcast_strides(&in_shape, &in_shape);
        let s_out = broadcast_strides(&kshape, &in_shape);
        let mut data = vec![T::zero(); super::numel_of(&kshape)];
        let x = self.data();
        for_each_pair(&in_shape, &s_in, &s_out, |_, i, o| data[o] += x[i]);
        let out_shape = Self::finish_reduce(kshape, axes, keepdim);
        Ok(Tensor::from_op(
            "sum",
            data,
            out_shape,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![T::zero(); super::numel_of(&in_shape)];
                for_each_pair(&in_shape, &s_in, &s_out, |_, i, o| gx[i] = g[o]);
                vec![Some(gx)]
            },
        ))
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor<T>> {
        let count: usize = axes
            .iter()
            .map(|&a| self.shape().get(a).copied().unwrap_or(1))
            .product();
        Ok(self
            .sum_axes(axes, keepdim)?
            .mul_scalar(cst::<T>(1.0 / count as f64)))
    }

    /// Maximum along `axes`; the gradient goes to the first arg-max.
    pub fn max_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor<T>> {
        let kshape = self.keepdim_shape(axes)?;
        let in_shape = self.shape().to_vec();
        let s_in = broadcast_strides(&in_shape, &in_shape);
        let s_out = broadcast_strides(&kshape, &in_shape);
        let n_out = super::numel_of(&kshape);
        let mut data = vec![T::neg_infinity(); n_out];
        let mut arg = vec![usize::MAX; n_out];
        let x = self.data();
        for_each_pair(&in_shape, &s_in, &s_out, |_, i, o| {
            if arg[o] == usize::MAX || x[i] > data[o] {
                data[o] = x[i];
                arg[o] = i;
            }
        });
        let out_shape = Self::finish_reduce(kshape, axes, keepdim);
        let n_in = self.numel();
        Ok(Tensor::from_op(
            "max",
            data,
            out_shape,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![T::zero(); n_in];
                for (o, &i) in arg.iter().enumerate() {
                    gx[i] += g[o];
                }
                vec![Some(gx)]
            },
        ))
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op("sum_all", vec![s], vec![1], vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Tensor<T> {
        self.sum_all()
            .mul_scalar(cst::<T>(1.0 / self.numel() as f64))
    }
}

#[inline]
pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn log_sigmoid<T: Float>(x: T) -> T {
    // -softplus(-x)
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
fn sign<T: Float>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[inline]
fn wrap_residual<T: Float>(x: T) -> T {
    let two_pi = T::TAU();
    x - two_pi * (x / two_pi).round()
}

#[inline]
pub fn anti_wrap<T: Float>(x: T) -> T {
    wrap_residual(x).abs()
}

#[inline]
pub fn atan2_principal<T: Float>(y: T, x: T) -> T {
    if y.is_zero() && x.is_zero() {
        return T::zero();
    }
    let a = y.atan2(x);
    if a <= -T::PI() {
        T::PI()
    } else {
        a
    }
}
