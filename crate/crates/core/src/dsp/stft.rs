//! Centered short-time Fourier transform and its overlap-add inverse.
//!
//! Framing: the signal is reflect-padded by `n_fft / 2` on both sides and
//! zero-extended so that exactly `1 + ceil(len / hop)` frames of `n_fft`
//! samples fit. Each frame is multiplied by a periodic Hann window and
//! transformed; only the `n_fft / 2 + 1` non-negative bins are kept.
//!
//! The inverse multiplies each inverse-transformed frame by the same window,
//! overlap-adds, divides by the summed squared window wherever that sum
//! exceeds [`WINDOW_EPS`], and trims back to the original length.
//!
//! Both directions are linear; their adjoints back the gradients of the
//! tensor ops [`stft_t`] and [`istft_t`].

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::StftConfig;
use crate::error::{Error, Result};
use crate::tensor::{cst, Float, Tensor};

pub const WINDOW_EPS: f64 = 1e-11;

/// Periodic Hann window: `0.5 - 0.5 cos(2 pi n / len)`.
pub fn hann_periodic<T: Float>(len: usize) -> Vec<T> {
    (0..len)
        .map(|n| cst(0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / len as f64).cos()))
        .collect()
}

/// Index into a signal of length `len` with reflection at both ends,
/// repeating the reflection as often as needed.
pub fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let r = i.rem_euclid(period);
    if r < len as isize {
        r as usize
    } else {
        (period - r) as usize
    }
}

/// Planned transforms for one geometry.
pub struct Stft<T: Float> {
    pub cfg: StftConfig,
    window: Vec<T>,
    fwd: Arc<dyn Fft<T>>,
    inv: Arc<dyn Fft<T>>,
}

impl<T: Float> Stft<T> {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg,
            window: hann_periodic(cfg.n_fft),
            fwd: planner.plan_fft_forward(cfg.n_fft),
            inv: planner.plan_fft_inverse(cfg.n_fft),
        })
    }

    pub fn bins(&self) -> usize {
        self.cfg.bins()
    }

    pub fn frames(&self, len: usize) -> usize {
        self.cfg.frames(len)
    }

    fn pad(&self) -> isize {
        (self.cfg.n_fft / 2) as isize
    }

    /// Sample of the padded signal at padded position `p`.
    fn padded_index(&self, p: usize, len: usize) -> Option<usize> {
        let i = p as isize - self.pad();
        // reflection covers the centering pad; the tail beyond it is zero
        (i < len as isize + self.pad()).then(|| reflect_index(i, len))
    }

    /// Returns `(re, im)`, each `[frames, bins]` row-major.
    pub fn forward(&self, x: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        if x.is_empty() {
            return Err(Error::Contract("stft of an empty signal".into()));
        }
        let (n, hop, f) = (self.cfg.n_fft, self.cfg.hop, self.bins());
        let frames = self.frames(x.len());
        let mut re = vec![T::zero(); frames * f];
        let mut im = vec![T::zero(); frames * f];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        for t in 0..frames {
            for (j, b) in buf.iter_mut().enumerate() {
                let v = self
                    .padded_index(t * hop + j, x.len())
                    .map_or(T::zero(), |i| x[i]);
                *b = Complex::new(v * self.window[j], T::zero());
            }
            self.fwd.process(&mut buf);
            for k in 0..f {
                re[t * f + k] = buf[k].re;
                im[t * f + k] = buf[k].im;
            }
        }
        Ok((re, im))
    }

    /// Adjoint of [`Stft::forward`] for a signal of length `len`.
    pub fn forward_adjoint(&self, g_re: &[T], g_im: &[T], len: usize) -> Vec<T> {
        let (n, hop, f) = (self.cfg.n_fft, self.cfg.hop, self.bins());
        let frames = self.frames(len);
        let mut gx = vec![T::zero(); len];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        for t in 0..frames {
            buf.iter_mut()
                .for_each(|b| *b = Complex::new(T::zero(), T::zero()));
            for k in 0..f {
                buf[k] = Complex::new(g_re[t * f + k], g_im[t * f + k]);
            }
            // unnormalized inverse: sum_k Z_k e^{+2 pi i k j / n}
            self.inv.process(&mut buf);
            for (j, b) in buf.iter().enumerate() {
                if let Some(i) = self.padded_index(t * hop + j, len) {
                    gx[i] += b.re * self.window[j];
                }
            }
        }
        gx
    }

    /// Summed squared window over the padded timeline.
    fn window_sum(&self, frames: usize) -> Vec<T> {
        let (n, hop) = (self.cfg.n_fft, self.cfg.hop);
        let mut s = vec![T::zero(); (frames - 1) * hop + n];
        for t in 0..frames {
            for (j, &w) in self.window.iter().enumerate() {
                s[t * hop + j] += w * w;
            }
        }
        s
    }

    fn inv_window_sum(&self, frames: usize) -> Vec<T> {
        let eps = cst::<T>(WINDOW_EPS);
        self.window_sum(frames)
            .into_iter()
            .map(|s| if s > eps { T::one() / s } else { T::zero() })
            .collect()
    }

    /// Inverse of `[frames, bins]` spectra, trimmed to `len` samples.
    pub fn inverse(&self, re: &[T], im: &[T], len: usize) -> Result<Vec<T>> {
        let (n, hop, f) = (self.cfg.n_fft, self.cfg.hop, self.bins());
        if re.len() != im.len() || !re.len().is_multiple_of(f) || re.is_empty() {
            return Err(Error::shape("istft", &[re.len()], &[im.len(), f]));
        }
        let frames = re.len() / f;
        let pad = n / 2;
        if (frames - 1) * hop + n < len + pad {
            return Err(Error::Contract(format!(
                "{frames} frames cannot cover {len} samples"
            )));
        }
        let mut acc = vec![T::zero(); (frames - 1) * hop + n];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        let scale = T::one() / cst::<T>(n as f64);
        for t in 0..frames {
            self.hermitian(&re[t * f..(t + 1) * f], &im[t * f..(t + 1) * f], &mut buf);
            self.inv.process(&mut buf);
            for (j, b) in buf.iter().enumerate() {
                acc[t * hop + j] += b.re * scale * self.window[j];
            }
        }
        let inv = self.inv_window_sum(frames);
        Ok((0..len).map(|i| acc[pad + i] * inv[pad + i]).collect())
    }

    /// Hermitian extension of one-sided bins; the imaginary parts of the DC
    /// and Nyquist bins are ignored.
    fn hermitian(&self, re: &[T], im: &[T], buf: &mut [Complex<T>]) {
        let n = self.cfg.n_fft;
        let f = self.bins();
        for k in 0..f {
            let edge = k == 0 || (n.is_multiple_of(2) && k == n / 2);
            buf[k] = Complex::new(re[k], if edge { T::zero() } else { im[k] });
        }
        for k in f..n {
            buf[k] = buf[n - k].conj();
        }
    }

    /// Adjoint of [`Stft::inverse`] for `frames` frames.
    pub fn inverse_adjoint(&self, g: &[T], frames: usize) -> (Vec<T>, Vec<T>) {
        let (n, hop, f) = (self.cfg.n_fft, self.cfg.hop, self.bins());
        let pad = n / 2;
        let inv = self.inv_window_sum(frames);
        let mut full = vec![T::zero(); (frames - 1) * hop + n];
        for (i, &gv) in g.iter().enumerate() {
            full[pad + i] = gv * inv[pad + i];
        }
        let mut g_re = vec![T::zero(); frames * f];
        let mut g_im = vec![T::zero(); frames * f];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        let scale = T::one() / cst::<T>(n as f64);
        let two = cst::<T>(2.0);
        for t in 0..frames {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(full[t * hop + j] * self.window[j] * scale, T::zero());
            }
            self.fwd.process(&mut buf);
            for k in 0..f {
                let edge = k == 0 || (n % 2 == 0 && k == n / 2);
                let c = if edge { T::one() } else { two };
                g_re[t * f + k] = c * buf[k].re;
                g_im[t * f + k] = if edge { T::zero() } else { c * buf[k].im };
            }
        }
        (g_re, g_im)
    }
}

/// Differentiable STFT of `[B, L]` signals: `[B, frames, bins, 2]` with the
/// real part at index 0 of the last axis.
pub fn stft_t<T: Float>(x: &Tensor<T>, cfg: StftConfig) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::shape("stft", x.shape(), &[]));
    }
    let st = Arc::new(Stft::<T>::new(cfg)?);
    let (b, len) = (x.dim(0), x.dim(1));
    let (frames, f) = (st.frames(len), st.bins());
    let mut out = Vec::with_capacity(b * frames * f * 2);
    for row in x.data().chunks(len) {
        let (re, im) = st.forward(row)?;
        for (r, i) in re.into_iter().zip(im) {
            out.push(r);
            out.push(i);
        }
    }
    Ok(Tensor::from_op(
        "stft",
        out,
        vec![b, frames, f, 2],
        vec![x.clone()],
        move |g| {
            let mut gx = Vec::with_capacity(b * len);
            for gb in g.chunks(frames * f * 2) {
                let g_re: Vec<T> = gb.iter().step_by(2).copied().collect();
                let g_im: Vec<T> = gb.iter().skip(1).step_by(2).copied().collect();
                gx.extend(st.forward_adjoint(&g_re, &g_im, len));
            }
            vec![Some(gx)]
        },
    ))
}

/// Differentiable inverse of `[B, frames, bins, 2]` spectra to `[B, len]`.
pub fn istft_t<T: Float>(spec: &Tensor<T>, len: usize, cfg: StftConfig) -> Result<Tensor<T>> {
    let st = Arc::new(Stft::<T>::new(cfg)?);
    if spec.rank() != 4 || spec.dim(2) != st.bins() || spec.dim(3) != 2 {
        return Err(Error::shape("istft", spec.shape(), &[st.bins(), 2]));
    }
    let (b, frames, f) = (spec.dim(0), spec.dim(1), spec.dim(2));
    let mut out = Vec::with_capacity(b * len);
    for sb in spec.data().chunks(frames * f * 2) {
        let re: Vec<T> = sb.iter().step_by(2).copied().collect();
        let im: Vec<T> = sb.iter().skip(1).step_by(2).copied().collect();
        out.extend(st.inverse(&re, &im, len)?);
    }
    Ok(Tensor::from_op(
        "istft",
        out,
        vec![b, len],
        vec![spec.clone()],
        move |g| {
            let mut gs = Vec::with_capacity(b * frames * f * 2);
            for gb in g.chunks(len) {
                let (g_re, g_im) = st.inverse_adjoint(gb, frames);
                for (r, i) in g_re.into_iter().zip(g_im) {
                    gs.push(r);
                    gs.push(i);
                }
            }
            vec![Some(gs)]
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> StftConfig {
        StftConfig { n_fft: 16, hop: 4 }
    }

    #[test]
    fn reflect_index_matches_mirror_padding() {
        // [a b c] reflected: ... c b | a b c | b a ...
        let got: Vec<usize> = (-4..7).map(|i| reflect_index(i, 3)).collect();
        assert_eq!(got, vec![0, 1, 2, 1, 0, 1, 2, 1, 0, 1, 2]);
        assert_eq!(reflect_index(-5, 1), 0);
    }

    #[test]
    fn forward_matches_direct_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn(&[37], 1.0, &mut rng).to_vec();
        let st = Stft::<f64>::new(small()).unwrap();
        let (re, im) = st.forward(&x).unwrap();
        let w = hann_periodic::<f64>(16);
        let frames = st.frames(37);
        assert_eq!(frames, 1 + 37usize.div_ceil(4));
        for t in 0..frames {
            for k in 0..9 {
                let (mut a, mut b) = (0.0, 0.0);
                for j in 0..16 {
                    let p = (t * 4 + j) as isize - 8;
                    let v = if p < 37 + 8 {
                        x[reflect_index(p, 37)]
                    } else {
                        0.0
                    };
                    let th = std::f64::consts::TAU * (k * j) as f64 / 16.0;
                    a += v * w[j] * th.cos();
                    b -= v * w[j] * th.sin();
                }
                assert!((re[t * 9 + k] - a).abs() < 1e-12 && (im[t * 9 + k] - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let st = Stft::<f64>::new(small()).unwrap();
        let len = 29;
        let frames = st.frames(len);
        let n = frames * 9;
        let x = Tensor::<f64>::randn(&[len], 1.0, &mut rng).to_vec();
        let gr = Tensor::<f64>::randn(&[n], 1.0, &mut rng).to_vec();
        let gi = Tensor::<f64>::randn(&[n], 1.0, &mut rng).to_vec();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();

        let (re, im) = st.forward(&x).unwrap();
        let lhs = dot(&re, &gr) + dot(&im, &gi);
        let rhs = dot(&x, &st.forward_adjoint(&gr, &gi, len));
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));

        let y = st.inverse(&gr, &gi, len).unwrap();
        let (ar, ai) = st.inverse_adjoint(&x, frames);
        let lhs = dot(&y, &x);
        let rhs = dot(&gr, &ar) + dot(&gi, &ai);
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn tensor_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(&[2, 21], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[2, 7, 9, 2], 1.0, &mut rng);
        let r = finite_diff_check(
            &[x],
            |v| Ok(stft_t(&v[0], small())?.square().mul(&w)?.sum_all()),
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.passed(), "{r}");

        let s = Tensor::<f64>::randn(&[2, 7, 9, 2], 1.0, &mut rng);
        let wy = Tensor::<f64>::randn(&[2, 21], 1.0, &mut rng);
        let r = finite_diff_check(
            &[s],
            |v| Ok(istft_t(&v[0], 21, small())?.square().mul(&wy)?.sum_all()),
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.passed(), "{r}");
    }
}
