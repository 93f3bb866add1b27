//! Conventional LSTM (sigmoid gates, tanh cell, hidden-to-hidden recurrence).
//!
//! [`GroupedLstm`] runs `groups` independent LSTMs of `width` channels side
//! by side; `groups = 1` is an ordinary LSTM. Gate order inside the packed
//! weights is `i, f, g, o`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{fan_in_uniform, ParamId, ParamStore};
use crate::tensor::{sigmoid, Float, Tensor};

#[derive(Debug, Clone)]
pub struct GroupedLstm {
    pub groups: usize,
    pub width: usize,
    pub wx: ParamId,
    pub wh: ParamId,
    pub bias: ParamId,
}

impl GroupedLstm {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        groups: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if groups == 0 || width == 0 {
            return Err(Error::Config(
                "LSTM needs at least one group of width >= 1".into(),
            ));
        }
        let shape = [groups, width, 4 * width];
        Ok(Self {
            groups,
            width,
            wx: store.add(
                format!("{prefix}.weight_ih"),
                fan_in_uniform(&shape, width, rng),
            )?,
            wh: store.add(
                format!("{prefix}.weight_hh"),
                fan_in_uniform(&shape, width, rng),
            )?,
            bias: store.add(
                format!("{prefix}.bias"),
                fan_in_uniform(&[groups, 4 * width], width, rng),
            )?,
        })
    }

    /// `x: [b, t, groups * width]` to the hidden sequence of the same shape.
    pub fn forward<T: Float>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (g, w) = (self.groups, self.width);
        if x.rank() != 3 || x.dim(2) != g * w {
            return Err(Error::shape("lstm", x.shape(), &[g * w]));
        }
        let (b, t) = (x.dim(0), x.dim(1));
        let xp = x
            .reshape(&[b * t, g, w])?
            .transpose(0, 1)?
            .bmm(store.get(self.wx))?
            .add(&store.get(self.bias).reshape(&[g, 1, 4 * w])?)?
            .reshape(&[g, b, t, 4 * w])?;
        let wh = store.get(self.wh);
        let mut h = Tensor::zeros(&[g, b, w]);
        let mut c = Tensor::zeros(&[g, b, w]);
        let mut hs = Vec::with_capacity(t);
        for step in 0..t {
            let pre = xp
                .narrow(2, step, 1)?
                .reshape(&[g, b, 4 * w])?
                .add(&h.bmm(wh)?)?;
            let i = pre.narrow(2, 0, w)?.sigmoid();
            let f = pre.narrow(2, w, w)?.sigmoid();
            let cand = pre.narrow(2, 2 * w, w)?.tanh();
            let o = pre.narrow(2, 3 * w, w)?.sigmoid();
            c = f.mul(&c)?.add(&i.mul(&cand)?)?;
            h = o.mul(&c.tanh())?;
            hs.push(h.unsqueeze(2)?);
        }
        Tensor::concat(&hs, 2)?
            .permute(&[1, 2, 0, 3])?
            .reshape(&[b, t, g * w])
    }
}

/// Residual LSTM block, `y = x + LSTM(x)`, used in place of a whole mLSTM block.
#[derive(Debug, Clone)]
pub struct LstmBlock {
    pub lstm: GroupedLstm,
}

impl LstmBlock {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            lstm: GroupedLstm::new(store, &format!("{prefix}.lstm"), 1, dim, rng)?,
        })
    }

    pub fn forward<T: Float>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.add(&self.lstm.forward(store, x)?)
    }
}

/// Single-group LSTM over one sequence on raw slices: `x` is `[t, width]`,
/// weights as in [`GroupedLstm`] with one group. Returns `[t, width]`.
pub fn lstm_sequence_raw<T: Float>(
    x: &[T],
    wx: &[T],
    wh: &[T],
    bias: &[T],
    width: usize,
) -> Vec<T> {
    let w4 = 4 * width;
    let t = x.len() / width;
    let mut h = vec![T::zero(); width];
    let mut c = vec![T::zero(); width];
    let mut pre = vec![T::zero(); w4];
    let mut out = Vec::with_capacity(x.len());
    for s in 0..t {
        pre.copy_from_slice(bias);
        let xs = &x[s * width..(s + 1) * width];
        for (j, (&xv, &hv)) in xs.iter().zip(&h).enumerate() {
            let (rx, rh) = (&wx[j * w4..(j + 1) * w4], &wh[j * w4..(j + 1) * w4]);
            for ((p, &a), &b) in pre.iter_mut().zip(rx).zip(rh) {
                *p += xv * a + hv * b;
            }
        }
        for j in 0..width {
            let i = sigmoid(pre[j]);
            let f = sigmoid(pre[width + j]);
            let g = pre[2 * width + j].tanh();
            let o = sigmoid(pre[3 * width + j]);
            c[j] = f * c[j] + i * g;
            h[j] = o * c[j].tanh();
        }
        out.extend_from_slice(&h);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_parameters_give_zero_hidden() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let l = GroupedLstm::new(&mut store, "l", 2, 3, &mut rng).unwrap();
        for id in [l.wx, l.wh, l.bias] {
            let z = Tensor::zeros(store.get(id).shape());
            store.set(id, z).unwrap();
        }
        let x = Tensor::<f64>::randn(&[2, 5, 6], 1.0, &mut rng);
        assert!(l
            .forward(&store, &x)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn one_step_by_hand() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let l = GroupedLstm::new(&mut store, "l", 1, 2, &mut rng).unwrap();
        let x = [0.7, -1.2];
        let y = l
            .forward(&store, &Tensor::from_vec(x.to_vec(), &[1, 1, 2]).unwrap())
            .unwrap();
        let (wx, b) = (store.get(l.wx).data(), store.get(l.bias).data());
        // h0 = c0 = 0, so only the input weights and bias matter
        let pre = |gate: usize, j: usize| {
            b[gate * 2 + j] + x[0] * wx[gate * 2 + j] + x[1] * wx[8 + gate * 2 + j]
        };
        for j in 0..2 {
            let c = sigmoid(pre(0, j)) * pre(2, j).tanh();
            let h = sigmoid(pre(3, j)) * c.tanh();
            assert!((y.data()[j] - h).abs() < 1e-15);
        }
    }

    #[test]
    fn groups_are_independent_lstms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let l = GroupedLstm::new(&mut store, "l", 2, 3, &mut rng).unwrap();
        let x = Tensor::<f64>::randn(&[1, 7, 6], 1.0, &mut rng);
        let y = l.forward(&store, &x).unwrap();
        let (wx, wh, b) = (
            store.get(l.wx).data(),
            store.get(l.wh).data(),
            store.get(l.bias).data(),
        );
        for grp in 0..2 {
            let xs: Vec<f64> = (0..7)
                .flat_map(|t| x.data()[t * 6 + grp * 3..][..3].to_vec())
                .collect();
            let r = lstm_sequence_raw(
                &xs,
                &wx[grp * 36..][..36],
                &wh[grp * 36..][..36],
                &b[grp * 12..][..12],
                3,
            );
            for t in 0..7 {
                for j in 0..3 {
                    assert!((y.data()[t * 6 + grp * 3 + j] - r[t * 3 + j]).abs() < 1e-14);
                }
            }
        }
    }
}
