use rayon::prelude::*;

use super::{Float, Tensor};
use crate::error::{Error, Result};

/// `out[m x n] = a[m x k] * b[k x n]`, row-major, overwriting `out`.
pub(crate) fn gemm<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let row = |(i, o): (usize, &mut [T])| {
        o.iter_mut().for_each(|v| *v = T::zero());
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av.is_zero() {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (ov, &bv) in o.iter_mut().zip(br) {
                *ov += av * bv;
            }
        }
    };
    if m * k * n >= 1 << 16 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

pub(crate) fn transpose2<T: Float>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

fn batched<T: Float>(a: &[T], b: &[T], batch: usize, (m, k, n): (usize, usize, usize)) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        gemm(
            &a[i * m * k..(i + 1) * m * k],
            &b[i * k * n..(i + 1) * k * n],
            &mut out[i * m * n..(i + 1) * m * n],
            m,
            k,
            n,
        );
    }
    out
}

fn batched_transpose<T: Float>(a: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len());
    for i in 0..batch {
        out.extend(transpose2(
            &a[i * rows * cols..(i + 1) * rows * cols],
            rows,
            cols,
        ));
    }
    out
}

impl<T: Float> Tensor<T> {
    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != 2 || other.rank() != 2 || self.dim(1) != other.dim(0) {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let a3 = self.reshape(&[1, self.dim(0), self.dim(1)])?;
        let b3 = other.reshape(&[1, other.dim(0), other.dim(1)])?;
        a3.bmm(&b3)?.reshape(&[self.dim(0), other.dim(1)])
    }

    /// Batched matrix product of `[b, m, k]` and `[b, k, n]`.
    pub fn bmm(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != 3
            || other.rank() != 3
            || self.dim(0) != other.dim(0)
            || self.dim(2) != other.dim(1)
        {
            return Err(Error::shape("bmm", self.shape(), other.shape()));
        }
        let (bs, m, k, n) = (self.dim(0), self.dim(1), self.dim(2), other.dim(2));
        let data = batched(self.data(), other.data(), bs, (m, k, n));
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            "bmm",
            data,
            vec![bs, m, n],
            vec![self.clone(), other.clone()],
            move |g| {
                // dA = dC B^T, dB = A^T dC
                let ga = a.tracks_grad().then(|| {
                    let bt = batched_transpose(b.data(), bs, k, n);
                    batched(g, &bt, bs, (m, n, k))
                });
                let gb = b.tracks_grad().then(|| {
                    let at = batched_transpose(a.data(), bs, m, k);
                    batched(&at, g, bs, (k, m, n))
                });
                vec![ga, gb]
            },
        ))
    }

    /// `x @ w (+ bias)` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&self, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let in_dim = *self.shape().last().unwrap();
        if w.rank() != 2 || w.dim(0) != in_dim {
            return Err(Error::shape("linear", self.shape(), w.shape()));
        }
        let rows = self.numel() / in_dim;
        let y = self.reshape(&[rows, in_dim])?.matmul(w)?;
        let y = match bias {
            Some(b) => y.add(b)?,
            None => y,
        };
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = w.dim(1);
        y.reshape(&shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_and_hand_product() {
        let i2 = Tensor::<f64>::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let m = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert_eq!(i2.matmul(&m).unwrap().data(), m.data());
        let r = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[1, 2]).unwrap();
        let c = Tensor::<f64>::from_vec(vec![3.0, 4.0], &[2, 1]).unwrap();
        assert_eq!(r.matmul(&c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::randn(&[5, 7], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[7, 3], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);
        let r = finite_diff_check(
            &[a, b],
            |v| Ok(v[0].matmul(&v[1])?.mul(&w)?.sum_all()),
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn bmm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::<f64>::randn(&[3, 4, 2], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[3, 2, 5], 1.0, &mut rng);
        let r = finite_diff_check(
            &[a, b],
            |v| Ok(v[0].bmm(&v[1])?.sigmoid().sum_all()),
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(r.passed(), "{r}");
    }
}
