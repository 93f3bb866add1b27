//! Shape manipulation. Everything here copies into a fresh contiguous buffer.

use super::broadcast::{broadcast_shape, broadcast_strides, for_each_pair, reduce_to};
use super::{numel_of, Float, Tensor};
use crate::error::{Error, Result};

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Contract(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

impl<T: Float> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel_of(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        if shape == self.shape() {
            return Ok(self.clone());
        }
        Ok(Tensor::from_op(
            "reshape",
            self.data().to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            |g| vec![Some(g.to_vec())],
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Contract(format!(
                "invalid permutation {perm:?} for rank {rank}"
            )));
        }
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return Ok(self.clone());
        }
        let in_shape = self.shape();
        let mut in_strides = vec![1; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let ident = broadcast_strides(&out_shape, &out_shape);
        let mut data = vec![T::zero(); self.numel()];
        let x = self.data();
        for_each_pair(&out_shape, &ident, &gather, |o, _, i| data[o] = x[i]);
        let oshape = out_shape.clone();
        let n = self.numel();
        Ok(Tensor::from_op(
            "permute",
            data,
            out_shape,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![T::zero(); n];
                for_each_pair(&oshape, &ident, &gather, |o, _, i| gx[i] = g[o]);
                vec![Some(gx)]
            },
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<T>> {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        check_axis(self.shape(), a)?;
        check_axis(self.shape(), b)?;
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Inserts a unit axis at `axis`.
    pub fn unsqueeze(&self, axis: usize) -> Result<Tensor<T>> {
        if axis > self.rank() {
            return Err(Error::Contract(format!("unsqueeze axis {axis} > rank")));
        }
        let mut s = self.shape().to_vec();
        s.insert(axis, 1);
        self.reshape(&s)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let out = broadcast_shape(self.shape(), shape)?;
        if out != shape {
            return Err(Error::shape("broadcast_to", self.shape(), shape));
        }
        let s = broadcast_strides(self.shape(), &out);
        let z = vec![0; out.len()];
        let mut data = vec![T::zero(); numel_of(&out)];
        let x = self.data();
        for_each_pair(&out, &s, &z, |o, i, _| data[o] = x[i]);
        let src = self.shape().to_vec();
        let oshape = out.clone();
        Ok(Tensor::from_op(
            "broadcast_to",
            data,
            out,
            vec![self.clone()],
            move |g| vec![Some(reduce_to(g, &oshape, &src))],
        ))
    }

    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        check_axis(first.shape(), axis)?;
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        let (outer, _, inner) = split_at_axis(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.dim(axis)).collect();
        let total: usize = lens.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let mut data = Vec::with_capacity(numel_of(&shape));
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        Ok(Tensor::from_op(
            "concat",
            data,
            shape,
            parts.to_vec(),
            move |g| {
                let mut grads: Vec<Vec<T>> = lens
                    .iter()
                    .map(|&l| Vec::with_capacity(outer * l * inner))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gp, &l) in grads.iter_mut().zip(&lens) {
                        gp.extend_from_slice(&g[off..off + l * inner]);
                        off += l * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            },
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        check_axis(self.shape(), axis)?;
        if len == 0 || start + len > self.dim(axis) {
            return Err(Error::Contract(format!(
                "narrow [{start}, {}) out of range for axis {axis} of {:?}",
                start + len,
                self.shape()
            )));
        }
        let (outer, n, inner) = split_at_axis(self.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        let x = self.data();
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let total = self.numel();
        Ok(Tensor::from_op(
            "narrow",
            data,
            shape,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![T::zero(); total];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Reverses the order of elements along `axis`.
    pub fn flip(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis(self.shape(), axis)?;
        let (outer, n, inner) = split_at_axis(self.shape(), axis);
        let flip = move |x: &[T]| {
            let mut out = Vec::with_capacity(x.len());
            for o in 0..outer {
                for i in (0..n).rev() {
                    let base = (o * n + i) * inner;
                    out.extend_from_slice(&x[base..base + inner]);
                }
            }
            out
        };
        let data = flip(self.data());
        Ok(Tensor::from_op(
            "flip",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            move |g| vec![Some(flip(g))],
        ))
    }

    /// Inclusive prefix sum along `axis`.
    pub fn cumsum(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis(self.shape(), axis)?;
        let (outer, n, inner) = split_at_axis(self.shape(), axis);
        let mut data = self.data().to_vec();
        for o in 0..outer {
            for i in 1..n {
                for j in 0..inner {
                    let prev = data[(o * n + i - 1) * inner + j];
                    data[(o * n + i) * inner + j] += prev;
                }
            }
        }
        Ok(Tensor::from_op(
            "cumsum",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            move |g| {
                // adjoint of a prefix sum is a suffix sum
                let mut gx = g.to_vec();
                for o in 0..outer {
                    for i in (0..n.saturating_sub(1)).rev() {
                        for j in 0..inner {
                            let next = gx[(o * n + i + 1) * inner + j];
                            gx[(o * n + i) * inner + j] += next;
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }
}
