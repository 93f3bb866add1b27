//! Parallel mLSTM form.
//!
//! Unrolling the recurrence gives, for `s <= t`,
//!
//! ```text
//! log D[t, s] = F_t - F_s + log i_s,   F_t = sum_{r <= t} log f_r
//! h_t = o_t * sum_s D[t,s] (q_t . k_s) v_s / max(|sum_s D[t,s] (q_t . k_s)|, 1)
//! ```
//!
//! Each row is evaluated with its own max `m_t` subtracted in log space;
//! the numerator and the normalizer scale by the same `exp(-m_t)`, so the
//! floor `1` becomes `exp(-m_t)` and the result is unchanged.

use rayon::prelude::*;

use super::GatingMode;
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Float, Tensor};

/// Differentiable parallel evaluation of independent sequences.
///
/// `q`, `k`, `v`, `o_pre` are `[n, t, d]` (`k` already scaled), `i_pre` and
/// `f_pre` are `[n, t]`. Returns `h` as `[n, t, d]`. The forward pass is
/// [`parallel_raw`]; the backward pass recomputes each row and treats the
/// stabilizer as a constant, which is exact because `h` does not depend on it.
pub fn mlstm_parallel<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    i_pre: &Tensor<T>,
    f_pre: &Tensor<T>,
    o_pre: &Tensor<T>,
    mode: GatingMode,
) -> Result<Tensor<T>> {
    let s3 = q.shape();
    if s3.len() != 3 || k.shape() != s3 || v.shape() != s3 || o_pre.shape() != s3 {
        return Err(Error::shape("mlstm_parallel", s3, k.shape()));
    }
    let (n, t, d) = (s3[0], s3[1], s3[2]);
    if i_pre.shape() != [n, t] || f_pre.shape() != [n, t] {
        return Err(Error::shape("mlstm_parallel", s3, i_pre.shape()));
    }
    let h = parallel_raw(
        q.data(),
        k.data(),
        v.data(),
        i_pre.data(),
        f_pre.data(),
        o_pre.data(),
        (n, t, d),
        mode,
    );
    let inputs = vec![
        q.clone(),
        k.clone(),
        v.clone(),
        i_pre.clone(),
        f_pre.clone(),
        o_pre.clone(),
    ];
    let saved = inputs.clone();
    Ok(Tensor::from_op(
        "mlstm_parallel",
        h,
        s3.to_vec(),
        inputs,
        move |g| {
            let x: Vec<&[T]> = saved.iter().map(|t| t.data()).collect();
            let per_seq: Vec<SeqGrads<T>> = (0..n)
                .into_par_iter()
                .map(|s| parallel_backward_seq(&x, g, s, (t, d), mode))
                .collect();
            let mut out: Vec<Vec<T>> = (0..3).map(|_| Vec::with_capacity(n * t * d)).collect();
            let (mut gi, mut gf, mut go) = (
                Vec::with_capacity(n * t),
                Vec::with_capacity(n * t),
                Vec::with_capacity(n * t * d),
            );
            for sg in per_seq {
                out[0].extend(sg.q);
                out[1].extend(sg.k);
                out[2].extend(sg.v);
                gi.extend(sg.i);
                gf.extend(sg.f);
                go.extend(sg.o);
            }
            let mut it = out.into_iter();
            let all = [
                it.next(),
                it.next(),
                it.next(),
                Some(gi),
                Some(gf),
                Some(go),
            ];
            all.into_iter()
                .zip(&saved)
                .map(|(v, t)| v.filter(|_| t.tracks_grad()))
                .collect()
        },
    ))
}

struct SeqGrads<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    i: Vec<T>,
    f: Vec<T>,
    o: Vec<T>,
}

fn parallel_backward_seq<T: Float>(
    x: &[&[T]],
    g: &[T],
    s: usize,
    (t, d): (usize, usize),
    mode: GatingMode,
) -> SeqGrads<T> {
    let (q, k, v) = (
        &x[0][s * t * d..][..t * d],
        &x[1][s * t * d..][..t * d],
        &x[2][s * t * d..][..t * d],
    );
    let (ip, fp) = (&x[3][s * t..][..t], &x[4][s * t..][..t]);
    let (op, g) = (&x[5][s * t * d..][..t * d], &g[s * t * d..][..t * d]);
    let log_i: Vec<T> = ip.iter().map(|&p| mode.log_input(p)).collect();
    let log_f: Vec<T> = fp.iter().map(|&p| mode.log_forget(p)).collect();
    let mut r = SeqGrads {
        q: vec![T::zero(); t * d],
        k: vec![T::zero(); t * d],
        v: vec![T::zero(); t * d],
        i: vec![T::zero(); t],
        f: vec![T::zero(); t],
        o: vec![T::zero(); t * d],
    };
    let (mut w, mut dt, mut c) = (vec![T::zero(); t], vec![T::zero(); t], vec![T::zero(); t]);
    let (mut num, mut gnum) = (vec![T::zero(); d], vec![T::zero(); d]);
    for row in 0..t {
        let mut m = T::neg_infinity();
        let mut seg = T::zero();
        for col in (0..=row).rev() {
            w[col] = seg + log_i[col];
            m = m.max(w[col]);
            seg += log_f[col];
        }
        let qr = &q[row * d..][..d];
        num.iter_mut().for_each(|x| *x = T::zero());
        let mut rs = T::zero();
        for col in 0..=row {
            dt[col] = (w[col] - m).exp();
            let qk: T = qr
                .iter()
                .zip(&k[col * d..][..d])
                .map(|(&a, &b)| a * b)
                .sum();
            c[col] = qk * dt[col];
            rs += c[col];
            for (nv, &vv) in num.iter_mut().zip(&v[col * d..][..d]) {
                *nv += c[col] * vv;
            }
        }
        let floor = (-m).exp();
        let den = rs.abs().max(floor);
        let gr = &g[row * d..][..d];
        let mut gden = T::zero();
        for j in 0..d {
            let so = sigmoid(op[row * d + j]);
            let ht = num[j] / den;
            r.o[row * d + j] = gr[j] * ht * so * (T::one() - so);
            let gh = gr[j] * so;
            gnum[j] = gh / den;
            gden -= gh * ht / den;
        }
        let grs = if rs.abs() >= floor {
            gden * rs.signum()
        } else {
            T::zero()
        };
        let mut prefix = T::zero();
        for col in 0..=row {
            let vc = &v[col * d..][..d];
            let gc = gnum.iter().zip(vc).map(|(&a, &b)| a * b).sum::<T>() + grs;
            for (gv, &gn) in r.v[col * d..][..d].iter_mut().zip(&gnum) {
                *gv += c[col] * gn;
            }
            let gs = gc * dt[col];
            for j in 0..d {
                r.q[row * d + j] += gs * k[col * d + j];
                r.k[col * d + j] += gs * qr[j];
            }
            let glog = gc * c[col];
            r.i[col] += glog;
            if col > 0 {
                r.f[col] += prefix;
            }
            prefix += glog;
        }
    }
    for (gi, &p) in r.i.iter_mut().zip(ip) {
        if mode == GatingMode::Sigmoid {
            *gi *= sigmoid(-p);
        }
    }
    for (gf, &p) in r.f.iter_mut().zip(fp) {
        if mode != GatingMode::Exponential {
            *gf *= sigmoid(-p);
        }
    }
    r
}

/// Parallel form on raw slices, one row at a time (memory `O(t)` per
/// sequence). Same layout as [`super::recurrent_sequence`].
#[allow(clippy::too_many_arguments)]
pub fn parallel_raw<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    i_pre: &[T],
    f_pre: &[T],
    o_pre: &[T],
    (n, t, d): (usize, usize, usize),
    mode: GatingMode,
) -> Vec<T> {
    let mut out = vec![T::zero(); n * t * d];
    out.par_chunks_mut(t * d).enumerate().for_each(|(s, dst)| {
        let base = s * t;
        let log_i: Vec<T> = (0..t).map(|r| mode.log_input(i_pre[base + r])).collect();
        let log_f: Vec<T> = (0..t).map(|r| mode.log_forget(f_pre[base + r])).collect();
        let mut w = vec![T::zero(); t];
        for row in 0..t {
            // segment sums accumulated backwards avoid cancelling two prefix sums
            let mut m = T::neg_infinity();
            let mut seg = T::zero();
            for c in (0..=row).rev() {
                w[c] = seg + log_i[c];
                m = m.max(w[c]);
                seg += log_f[c];
            }
            let qt = &q[(base + row) * d..][..d];
            let h = &mut dst[row * d..(row + 1) * d];
            let mut rs = T::zero();
            for c in 0..=row {
                let kc = &k[(base + c) * d..][..d];
                let qk: T = qt.iter().zip(kc).map(|(&a, &b)| a * b).sum();
                let wc = (w[c] - m).exp() * qk;
                rs += wc;
                for (hv, &vv) in h.iter_mut().zip(&v[(base + c) * d..][..d]) {
                    *hv += wc * vv;
                }
            }
            let den = rs.abs().max((-m).exp());
            for (hv, &o) in h.iter_mut().zip(&o_pre[(base + row) * d..][..d]) {
                *hv = sigmoid(o) * *hv / den;
            }
        }
    });
    out
}
