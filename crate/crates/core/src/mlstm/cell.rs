//! Step-recurrent mLSTM on raw slices.
//!
//! The state is kept in the log-stabilized form: the stored `c`, `n` equal
//! the true cell and normalizer scaled by `exp(-m)`, with
//! `m_t = max(log f_t + m_{t-1}, log i_t)` and `m_0 = 0`.

use rayon::prelude::*;

use super::GatingMode;
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Float, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct MLstmState<T: Float> {
    pub d: usize,
    /// Row-major `d x d`, `c[a * d + b]` pairs value axis `a` with key axis `b`.
    pub c: Vec<T>,
    pub n: Vec<T>,
    pub m: T,
}

impl<T: Float> MLstmState<T> {
    pub fn zeros(d: usize) -> Self {
        Self {
            d,
            c: vec![T::zero(); d * d],
            n: vec![T::zero(); d],
            m: T::zero(),
        }
    }

    /// State size in bytes; independent of how many steps have been taken.
    pub fn bytes(&self) -> usize {
        (self.c.len() + self.n.len() + 1) * std::mem::size_of::<T>()
    }
}

/// Projected inputs for one time step of one head. `k` already carries the
/// `1/sqrt(d)` key scale.
#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a, T> {
    pub q: &'a [T],
    pub k: &'a [T],
    pub v: &'a [T],
    pub i_pre: T,
    pub f_pre: T,
    pub o_pre: &'a [T],
}

/// Advances the state by one step and returns `h_t`.
pub fn mlstm_step<T: Float>(
    state: &mut MLstmState<T>,
    x: &StepInput<'_, T>,
    mode: GatingMode,
) -> Result<Vec<T>> {
    let d = state.d;
    if [x.q.len(), x.k.len(), x.v.len(), x.o_pre.len()]
        .iter()
        .any(|&l| l != d)
    {
        return Err(Error::Contract(format!(
            "mlstm_step expects width {d} inputs"
        )));
    }
    let log_f = mode.log_forget(x.f_pre);
    let log_i = mode.log_input(x.i_pre);
    let m = (log_f + state.m).max(log_i);
    let fs = (log_f + state.m - m).exp();
    let is = (log_i - m).exp();

    for a in 0..d {
        let row = &mut state.c[a * d..(a + 1) * d];
        let iv = is * x.v[a];
        for (c, &k) in row.iter_mut().zip(x.k) {
            *c = fs * *c + iv * k;
        }
    }
    for (n, &k) in state.n.iter_mut().zip(x.k) {
        *n = fs * *n + is * k;
    }
    state.m = m;

    let nq: T = state.n.iter().zip(x.q).map(|(&n, &q)| n * q).sum();
    let den = nq.abs().max((-m).exp());
    let h: Vec<T> = (0..d)
        .map(|a| {
            let cq: T = state.c[a * d..(a + 1) * d]
                .iter()
                .zip(x.q)
                .map(|(&c, &q)| c * q)
                .sum();
            sigmoid(x.o_pre[a]) * cq / den
        })
        .collect();
    if h.iter().any(|v| !v.is_finite()) || !m.is_finite() {
        return Err(Error::Numeric(
            "mlstm_step produced a non-finite value".into(),
        ));
    }
    Ok(h)
}

/// Runs independent sequences through the recurrent form.
///
/// `q`, `k`, `v`, `o_pre` are `[n, t, d]`, `i_pre` and `f_pre` are `[n, t]`,
/// all row-major. Returns `[n, t, d]`.
#[allow(clippy::too_many_arguments)]
pub fn recurrent_sequence<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    i_pre: &[T],
    f_pre: &[T],
    o_pre: &[T],
    (n, t, d): (usize, usize, usize),
    mode: GatingMode,
) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(n * t * d);
    for s in 0..n {
        let mut state = MLstmState::zeros(d);
        for step in 0..t {
            let r = (s * t + step) * d..(s * t + step + 1) * d;
            let x = StepInput {
                q: &q[r.clone()],
                k: &k[r.clone()],
                v: &v[r.clone()],
                i_pre: i_pre[s * t + step],
                f_pre: f_pre[s * t + step],
                o_pre: &o_pre[r],
            };
            out.extend(mlstm_step(&mut state, &x, mode)?);
        }
    }
    Ok(out)
}

struct Trace<T> {
    h: Vec<T>,
    /// Stabilized `c` and `n` after every step, and the stabilizer before it.
    c: Vec<T>,
    n: Vec<T>,
    m_prev: Vec<T>,
    m: Vec<T>,
}

fn trace_sequence<T: Float>(
    x: &[&[T]],
    s: usize,
    (t, d): (usize, usize),
    mode: GatingMode,
) -> Result<Trace<T>> {
    let mut state = MLstmState::zeros(d);
    let mut tr = Trace {
        h: Vec::with_capacity(t * d),
        c: Vec::with_capacity(t * d * d),
        n: Vec::with_capacity(t * d),
        m_prev: Vec::with_capacity(t),
        m: Vec::with_capacity(t),
    };
    for step in 0..t {
        let r = (s * t + step) * d..(s * t + step + 1) * d;
        let inp = StepInput {
            q: &x[0][r.clone()],
            k: &x[1][r.clone()],
            v: &x[2][r.clone()],
            i_pre: x[3][s * t + step],
            f_pre: x[4][s * t + step],
            o_pre: &x[5][r],
        };
        tr.m_prev.push(state.m);
        tr.h.extend(mlstm_step(&mut state, &inp, mode)?);
        tr.c.extend_from_slice(&state.c);
        tr.n.extend_from_slice(&state.n);
        tr.m.push(state.m);
    }
    Ok(tr)
}

/// Differentiable recurrent form with backpropagation through time.
///
/// Same layout and result as [`recurrent_sequence`]. The stabilized states
/// of every step are kept for the backward pass (`O(t d^2)` per sequence);
/// the stabilizer is held constant there, which is exact because `h` does
/// not depend on it.
pub fn mlstm_recurrent<T: Float>(
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
        return Err(Error::shape("mlstm_recurrent", s3, k.shape()));
    }
    let (n, t, d) = (s3[0], s3[1], s3[2]);
    if i_pre.shape() != [n, t] || f_pre.shape() != [n, t] {
        return Err(Error::shape("mlstm_recurrent", s3, i_pre.shape()));
    }
    let inputs = vec![
        q.clone(),
        k.clone(),
        v.clone(),
        i_pre.clone(),
        f_pre.clone(),
        o_pre.clone(),
    ];
    let x: Vec<&[T]> = inputs.iter().map(|t| t.data()).collect();
    let traces: Vec<Trace<T>> = (0..n)
        .into_par_iter()
        .map(|s| trace_sequence(&x, s, (t, d), mode))
        .collect::<Result<_>>()?;
    let h: Vec<T> = traces.iter().flat_map(|tr| tr.h.iter().copied()).collect();
    let saved = inputs.clone();
    Ok(Tensor::from_op(
        "mlstm_recurrent",
        h,
        s3.to_vec(),
        inputs,
        move |g| {
            let x: Vec<&[T]> = saved.iter().map(|t| t.data()).collect();
            let per_seq: Vec<[Vec<T>; 6]> = traces
                .par_iter()
                .enumerate()
                .map(|(s, tr)| bptt_seq(&x, g, tr, s, (t, d), mode))
                .collect();
            let mut out: [Vec<T>; 6] = Default::default();
            for sg in per_seq {
                for (o, part) in out.iter_mut().zip(sg) {
                    o.extend(part);
                }
            }
            out.into_iter()
                .zip(&saved)
                .map(|(v, t)| t.tracks_grad().then_some(v))
                .collect()
        },
    ))
}

fn bptt_seq<T: Float>(
    x: &[&[T]],
    g: &[T],
    tr: &Trace<T>,
    s: usize,
    (t, d): (usize, usize),
    mode: GatingMode,
) -> [Vec<T>; 6] {
    let at = |i: usize, step: usize| &x[i][(s * t + step) * d..][..d];
    let mut gq = vec![T::zero(); t * d];
    let mut gk = vec![T::zero(); t * d];
    let mut gv = vec![T::zero(); t * d];
    let mut gi = vec![T::zero(); t];
    let mut gf = vec![T::zero(); t];
    let mut go = vec![T::zero(); t * d];
    let mut dc = vec![T::zero(); d * d];
    let mut dn = vec![T::zero(); d];
    let zeros = vec![T::zero(); d * d];
    let mut gnum = vec![T::zero(); d];
    for step in (0..t).rev() {
        let (q, k, v, o) = (at(0, step), at(1, step), at(2, step), at(5, step));
        let (ip, fp) = (x[3][s * t + step], x[4][s * t + step]);
        let c = &tr.c[step * d * d..][..d * d];
        let nv = &tr.n[step * d..][..d];
        let (cp, np) = if step == 0 {
            (&zeros[..], &zeros[..d])
        } else {
            (
                &tr.c[(step - 1) * d * d..][..d * d],
                &tr.n[(step - 1) * d..][..d],
            )
        };
        let m = tr.m[step];
        let (log_f, log_i) = (mode.log_forget(fp), mode.log_input(ip));
        let fs = (log_f + tr.m_prev[step] - m).exp();
        let is = (log_i - m).exp();

        let nq: T = nv.iter().zip(q).map(|(&a, &b)| a * b).sum();
        let floor = (-m).exp();
        let den = nq.abs().max(floor);
        let gr = &g[(s * t + step) * d..][..d];
        let mut gden = T::zero();
        for a in 0..d {
            let cq: T = c[a * d..][..d].iter().zip(q).map(|(&c, &q)| c * q).sum();
            let ht = cq / den;
            let so = sigmoid(o[a]);
            go[step * d + a] = gr[a] * ht * so * (T::one() - so);
            let gh = gr[a] * so;
            gnum[a] = gh / den;
            gden -= gh * ht / den;
        }
        let gnq = if nq.abs() >= floor {
            gden * nq.signum()
        } else {
            T::zero()
        };
        let gqs = &mut gq[step * d..][..d];
        for a in 0..d {
            let row = &c[a * d..][..d];
            let dcr = &mut dc[a * d..][..d];
            for b in 0..d {
                dcr[b] += gnum[a] * q[b];
                gqs[b] += row[b] * gnum[a];
            }
        }
        for b in 0..d {
            gqs[b] += gnq * nv[b];
            dn[b] += gnq * q[b];
        }

        let mut gfs = T::zero();
        let mut gis = T::zero();
        let (gks, gvs) = (&mut gk[step * d..][..d], &mut gv[step * d..][..d]);
        for a in 0..d {
            let dcr = &dc[a * d..][..d];
            let cpr = &cp[a * d..][..d];
            let mut dk = T::zero();
            for b in 0..d {
                gfs += dcr[b] * cpr[b];
                dk += dcr[b] * k[b];
                gks[b] += is * v[a] * dcr[b];
            }
            gis += v[a] * dk;
            gvs[a] = is * dk;
        }
        for b in 0..d {
            gfs += dn[b] * np[b];
            gis += dn[b] * k[b];
            gks[b] += is * dn[b];
        }
        gf[step] = gfs
            * fs
            * if mode == GatingMode::Exponential {
                T::one()
            } else {
                sigmoid(-fp)
            };
        gi[step] = gis
            * is
            * if mode == GatingMode::Sigmoid {
                sigmoid(-ip)
            } else {
                T::one()
            };
        dc.iter_mut().for_each(|v| *v *= fs);
        dn.iter_mut().for_each(|v| *v *= fs);
    }
    [gq, gk, gv, gi, gf, go]
}

/// Direct, unstabilized evaluation of the recurrence for one sequence
/// (`[t, d]` streams). Only meaningful while the gates do not overflow.
pub fn naive_recurrence(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    i_pre: &[f64],
    f_pre: &[f64],
    o_pre: &[f64],
    d: usize,
    mode: GatingMode,
) -> Vec<f64> {
    let t = i_pre.len();
    let mut c = vec![0.0; d * d];
    let mut n = vec![0.0; d];
    let mut out = Vec::with_capacity(t * d);
    for s in 0..t {
        let i = mode.log_input(i_pre[s]).exp();
        let f = mode.log_forget(f_pre[s]).exp();
        let (qs, ks, vs) = (&q[s * d..][..d], &k[s * d..][..d], &v[s * d..][..d]);
        for a in 0..d {
            for b in 0..d {
                c[a * d + b] = f * c[a * d + b] + i * vs[a] * ks[b];
            }
        }
        for b in 0..d {
            n[b] = f * n[b] + i * ks[b];
        }
        let nq: f64 = (0..d).map(|b| n[b] * qs[b]).sum();
        let den = nq.abs().max(1.0);
        for a in 0..d {
            let cq: f64 = (0..d).map(|b| c[a * d + b] * qs[b]).sum();
            out.push(sigmoid(o_pre[s * d + a]) * cq / den);
        }
    }
    out
}
