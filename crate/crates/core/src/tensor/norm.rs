//! Normalization layers composed from differentiable primitives.

use super::{cst, Float, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
enum Affine {
    /// Parameter index is the position within the row.
    PerElement,
    /// Parameter index is `row % channels`.
    PerRow(usize),
}

/// Standardizes every contiguous row of length `n`, then applies `gamma`
/// and `beta` in one recorded op.
fn norm_affine<T: Float>(
    x: &Tensor<T>,
    n: usize,
    gamma: &Tensor<T>,
    beta: Option<&Tensor<T>>,
    affine: Affine,
    eps: f64,
) -> Result<Tensor<T>> {
    if n == 0 {
        return Err(Error::Contract("normalization over an empty axis".into()));
    }
    let rows = x.numel() / n;
    let (xd, gd) = (x.data(), gamma.data());
    let bd = beta.map(|b| b.data());
    let ch = move |r: usize, j: usize| match affine {
        Affine::PerElement => j,
        Affine::PerRow(c) => r % c,
    };
    let nt: T = cst(n as f64);
    let mut xhat = vec![T::zero(); x.numel()];
    let mut inv = vec![T::zero(); rows];
    let mut y = vec![T::zero(); x.numel()];
    for r in 0..rows {
        let row = &xd[r * n..(r + 1) * n];
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / nt;
        let var = row
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
            / nt;
        let s = T::one() / (var + cst(eps)).sqrt();
        inv[r] = s;
        for j in 0..n {
            let h = (row[j] - mean) * s;
            xhat[r * n + j] = h;
            let k = ch(r, j);
            y[r * n + j] = h * gd[k] + bd.map_or(T::zero(), |b| b[k]);
        }
    }
    let mut inputs = vec![x.clone(), gamma.clone()];
    inputs.extend(beta.cloned());
    let (tx, tg, tb) = (
        x.tracks_grad(),
        gamma.tracks_grad(),
        beta.map(|b| b.tracks_grad()),
    );
    let (glen, gamma) = (gamma.numel(), gamma.clone());
    Ok(Tensor::from_op(
        "norm_affine",
        y,
        x.shape().to_vec(),
        inputs,
        move |g| {
            let gd = gamma.data();
            let mut gx = vec![T::zero(); if tx { g.len() } else { 0 }];
            let mut gg = vec![T::zero(); glen];
            let mut gb = vec![T::zero(); glen];
            let mut gh = vec![T::zero(); n];
            for r in 0..rows {
                let (mut m1, mut m2) = (T::zero(), T::zero());
                for j in 0..n {
                    let i = r * n + j;
                    let k = ch(r, j);
                    gg[k] += g[i] * xhat[i];
                    gb[k] += g[i];
                    gh[j] = g[i] * gd[k];
                    m1 += gh[j];
                    m2 += gh[j] * xhat[i];
                }
                if tx {
                    let (m1, m2) = (m1 / nt, m2 / nt);
                    for j in 0..n {
                        let i = r * n + j;
                        gx[i] = inv[r] * (gh[j] - m1 - xhat[i] * m2);
                    }
                }
            }
            let mut out = vec![tx.then_some(gx), tg.then_some(gg)];
            if let Some(tb) = tb {
                out.push(tb.then_some(gb));
            }
            out
        },
    ))
}

/// Normalizes over the last axis, then applies `gamma` (and `beta`).
pub fn layer_norm<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: Option<&Tensor<T>>,
    eps: f64,
) -> Result<Tensor<T>> {
    let d = x.dim(x.rank() - 1);
    if gamma.shape() != [d] || beta.is_some_and(|b| b.shape() != [d]) {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    norm_affine(x, d, gamma, beta, Affine::PerElement, eps)
}

/// Per-(batch, channel) normalization of `[B, C, H, W]` over `H, W` with a
/// per-channel affine transform.
pub fn instance_norm<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    if x.rank() != 4 || gamma.shape() != [x.dim(1)] || beta.shape() != [x.dim(1)] {
        return Err(Error::shape("instance_norm", x.shape(), gamma.shape()));
    }
    norm_affine(
        x,
        x.dim(2) * x.dim(3),
        gamma,
        Some(beta),
        Affine::PerRow(x.dim(1)),
        eps,
    )
}
