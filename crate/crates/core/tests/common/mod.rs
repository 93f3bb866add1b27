#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normals(rng: &mut ChaCha8Rng, n: usize, std: f64, shift: f64) -> Vec<f64> {
    (0..n)
        .map(|_| shift + std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Projected mLSTM streams for `n` sequences of `t` steps of width `d`.
pub struct Streams {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub o: Vec<f64>,
    pub dims: (usize, usize, usize),
}

impl Streams {
    pub fn random(n: usize, t: usize, d: usize, gate_std: f64, seed: u64) -> Self {
        let mut r = rng(seed);
        let scale = 1.0 / (d as f64).sqrt();
        let k = normals(&mut r, n * t * d, scale, 0.0);
        Self {
            q: normals(&mut r, n * t * d, 1.0, 0.0),
            k,
            v: normals(&mut r, n * t * d, 1.0, 0.0),
            i: normals(&mut r, n * t, gate_std, 0.0),
            f: normals(&mut r, n * t, gate_std, 0.0),
            o: normals(&mut r, n * t * d, 1.0, 0.0),
            dims: (n, t, d),
        }
    }

    /// Forget gates in `(0, 1)` (log forget gate `logsigmoid(g)` with
    /// `g ~ N(2, 1.5^2)`), input gates `exp` or `sigmoid` of `N(0, 1)`.
    pub fn forgetting(
        n: usize,
        t: usize,
        d: usize,
        mode: xlstm_se::mlstm::GatingMode,
        seed: u64,
    ) -> Self {
        let mut s = Self::random(n, t, d, 1.0, seed);
        for f in &mut s.f {
            let g = 2.0 + 1.5 * *f;
            *f = match mode {
                xlstm_se::mlstm::GatingMode::Exponential => -(1.0 + (-g).exp()).ln(),
                _ => g,
            };
        }
        s
    }

    /// Streams produced by a freshly initialized layer of width `d` with
    /// `heads` heads on unit-normal input.
    pub fn from_layer(
        b: usize,
        t: usize,
        d: usize,
        heads: usize,
        mode: xlstm_se::mlstm::GatingMode,
        seed: u64,
    ) -> Self {
        use xlstm_se::mlstm::{MLstmLayer, MLstmLayerConfig};
        let mut r = rng(seed);
        let mut store = xlstm_se::nn::ParamStore::<f64>::new();
        let cfg = MLstmLayerConfig::new(d, mode).with_heads(heads);
        let layer = MLstmLayer::new(&mut store, "cell", cfg, &mut r).unwrap();
        let x = xlstm_se::Tensor::<f64>::randn(&[b, t, d], 1.0, &mut r);
        let s = layer.streams(&store, &x).unwrap();
        Self {
            q: s.q.to_vec(),
            k: s.k.to_vec(),
            v: s.v.to_vec(),
            i: s.i_pre.to_vec(),
            f: s.f_pre.to_vec(),
            o: s.o.to_vec(),
            dims: (b * heads, t, d / heads),
        }
    }

    pub fn cast<T: xlstm_se::Float>(v: &[f64]) -> Vec<T> {
        v.iter().map(|&x| T::of_f64(x)).collect()
    }
}

pub fn max_abs_diff<T: xlstm_se::Float>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .fold(0.0, |m, (x, y)| m.max((x.as_f64() - y.as_f64()).abs()))
}

/// Adds `N(0, std^2)` noise to every parameter so that gradient checks run at
/// a generic point instead of the near-degenerate initialization.
pub fn jitter(store: &mut xlstm_se::nn::ParamStore<f64>, std: f64, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get(id);
        let noisy: Vec<f64> = t
            .data()
            .iter()
            .map(|&v| v + std * r.sample::<f64, _>(StandardNormal))
            .collect();
        let shape = t.shape().to_vec();
        store
            .set(id, xlstm_se::Tensor::from_vec(noisy, &shape).unwrap())
            .unwrap();
    }
}
