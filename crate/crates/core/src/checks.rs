//! Self-contained verification routines shared by the command line and the
//! acceptance run. Each returns measurements; verdicts use [`crate::tolerance`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dsp::{
    apply_mask, apply_mask_t, istft, istft_t, stft, stft_t, StftConfig, Waveform, SAMPLE_RATE,
};
use crate::enhance::{synthesize, Spectral};
use crate::error::{Error, Result};
use crate::mlstm::{
    mlstm_parallel, mlstm_recurrent, parallel_raw, recurrent_sequence, GatingMode, GroupedLstm,
    MLstmBlock, MLstmBlockConfig, MLstmLayer, MLstmLayerConfig,
};
use crate::model::{count_parameters, ModelConfig, SeModel, PRESETS};
use crate::nn::{param_grad_check, sample_coords, ParamStore};
use crate::tensor::norm::{instance_norm, layer_norm};
use crate::tensor::{
    finite_diff_check, log_sigmoid, no_grad, Conv1dGeom, Conv2dGeom, GradReport, Tensor,
};
use crate::tolerance::{GRAD_PARAM_FRACTION, GRAD_REL, GRAD_STEP};
use crate::train::{loss_suite, LossWeights};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normals(r: &mut ChaCha8Rng, n: usize, std: f64, shift: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(r);
            shift + std * z
        })
        .collect()
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, r)
}

fn positive(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 0.5, 2.0, r)
}

/// Adds `N(0, std^2)` noise to every parameter so zero-initialized weights do
/// not hide gradient paths.
pub fn jitter(store: &mut ParamStore<f64>, std: f64, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get(id);
        let noisy: Vec<f64> = t
            .data()
            .iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(&mut r);
                v + std * z
            })
            .collect();
        let shape = t.shape().to_vec();
        store
            .set(id, Tensor::from_vec(noisy, &shape).expect("same shape"))
            .expect("same shape");
    }
}

fn weighted_readout(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng(seed ^ 0x5EED))
}

/// Gradient check of `sum(f(x) * w)` for a fixed random `w`, over every input element.
fn check_inputs<F>(inputs: Vec<Tensor<f64>>, seed: u64, f: F) -> Result<GradReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let y = no_grad(|| f(&inputs))?;
    let w = weighted_readout(y.shape(), seed);
    finite_diff_check(
        &inputs,
        |x| Ok(f(x)?.mul(&w)?.sum_all()),
        GRAD_STEP,
        GRAD_REL,
    )
}

/// Gradient check over parameters of a store and, optionally, an input.
fn check_params<F>(
    store: &ParamStore<f64>,
    coords: Option<usize>,
    seed: u64,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&ParamStore<f64>) -> Result<Tensor<f64>>,
{
    let y = no_grad(|| f(store))?;
    let w = weighted_readout(y.shape(), seed);
    let coords = match coords {
        Some(n) => sample_coords(store, n, &mut rng(seed + 1)),
        None => store
            .ids()
            .flat_map(|id| (0..store.get(id).numel()).map(move |e| (id, e)))
            .collect(),
    };
    param_grad_check(
        store,
        &coords,
        |s| Ok(f(s)?.mul(&w)?.sum_all()),
        GRAD_STEP,
        GRAD_REL,
    )
}

/// Named gradient cases and their groups.
pub const GRAD_CASES: &[(&str, &str)] = &[
    ("add", "elementwise"),
    ("sub", "elementwise"),
    ("mul", "elementwise"),
    ("div", "elementwise"),
    ("maximum", "elementwise"),
    ("atan2", "elementwise"),
    ("exp", "elementwise"),
    ("log", "elementwise"),
    ("sqrt", "elementwise"),
    ("powf", "elementwise"),
    ("square", "elementwise"),
    ("abs", "elementwise"),
    ("sin", "elementwise"),
    ("cos", "elementwise"),
    ("sigmoid", "elementwise"),
    ("log_sigmoid", "elementwise"),
    ("tanh", "elementwise"),
    ("silu", "elementwise"),
    ("anti_wrap", "elementwise"),
    ("prelu", "elementwise"),
    ("sum_axes", "reduction"),
    ("mean_axes", "reduction"),
    ("max_axes", "reduction"),
    ("cumsum", "reduction"),
    ("permute", "shape"),
    ("concat", "shape"),
    ("narrow", "shape"),
    ("flip", "shape"),
    ("broadcast_to", "shape"),
    ("matmul", "linalg"),
    ("bmm", "linalg"),
    ("linear", "linalg"),
    ("conv2d", "conv"),
    ("conv_transpose2d", "conv"),
    ("conv1d", "conv"),
    ("conv_transpose1d", "conv"),
    ("layer_norm", "norm"),
    ("instance_norm", "norm"),
    ("stft", "spectral"),
    ("istft", "spectral"),
    ("mlstm_parallel", "mlstm"),
    ("mlstm_recurrent", "mlstm"),
    ("mlstm_layer", "mlstm"),
    ("mlstm_block", "mlstm"),
    ("lstm", "lstm"),
    ("model", "model"),
];

pub fn grad_group(name: &str) -> Option<&'static str> {
    GRAD_CASES.iter().find(|c| c.0 == name).map(|c| c.1)
}

fn small_stft() -> StftConfig {
    StftConfig { n_fft: 32, hop: 8 }
}

fn mlstm_streams(seed: u64) -> Vec<Tensor<f64>> {
    let (n, t, d) = (2, 6, 4);
    let mut r = rng(seed);
    vec![
        randn(&[n, t, d], &mut r),
        randn(&[n, t, d], &mut r).mul_scalar(0.5),
        randn(&[n, t, d], &mut r),
        randn(&[n, t], &mut r),
        randn(&[n, t], &mut r).add_scalar(1.0),
        randn(&[n, t, d], &mut r),
    ]
}

/// Runs one named gradient case.
pub fn grad_case(name: &str, seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let r = &mut r;
    let geom2 = Conv2dGeom {
        stride: (2, 1),
        padding: (1, 2),
        dilation: (1, 2),
        groups: 2,
    };
    let one = |x: Vec<Tensor<f64>>, f: fn(&Tensor<f64>) -> Result<Tensor<f64>>| {
        check_inputs(x, seed, move |v| f(&v[0]))
    };
    match name {
        "add" => check_inputs(vec![randn(&[3, 4], r), randn(&[4], r)], seed, |v| {
            v[0].add(&v[1])
        }),
        "sub" => check_inputs(vec![randn(&[2, 3], r), randn(&[2, 1], r)], seed, |v| {
            v[0].sub(&v[1])
        }),
        "mul" => check_inputs(vec![randn(&[2, 3, 4], r), randn(&[3, 1], r)], seed, |v| {
            v[0].mul(&v[1])
        }),
        "div" => check_inputs(vec![randn(&[3, 4], r), positive(&[3, 4], r)], seed, |v| {
            v[0].div(&v[1])
        }),
        "maximum" => check_inputs(vec![randn(&[3, 4], r), randn(&[3, 4], r)], seed, |v| {
            v[0].maximum(&v[1])
        }),
        "atan2" => check_inputs(vec![randn(&[3, 4], r), randn(&[3, 4], r)], seed, |v| {
            v[0].atan2(&v[1])
        }),
        "exp" => one(vec![randn(&[3, 4], r)], |x| Ok(x.exp())),
        "log" => one(vec![positive(&[3, 4], r)], |x| x.log()),
        "sqrt" => one(vec![positive(&[3, 4], r)], |x| x.sqrt()),
        "powf" => one(vec![positive(&[3, 4], r)], |x| x.powf(1.0 / 0.3)),
        "square" => one(vec![randn(&[3, 4], r)], |x| Ok(x.square())),
        "abs" => one(vec![randn(&[3, 4], r)], |x| Ok(x.abs())),
        "sin" => one(vec![randn(&[3, 4], r)], |x| Ok(x.sin())),
        "cos" => one(vec![randn(&[3, 4], r)], |x| Ok(x.cos())),
        "sigmoid" => one(vec![randn(&[3, 4], r)], |x| Ok(x.sigmoid())),
        "log_sigmoid" => one(vec![randn(&[3, 4], r)], |x| Ok(x.log_sigmoid())),
        "tanh" => one(vec![randn(&[3, 4], r)], |x| Ok(x.tanh())),
        "silu" => one(vec![randn(&[3, 4], r)], |x| Ok(x.silu())),
        "anti_wrap" => one(vec![randn(&[4, 5], r).mul_scalar(4.0)], |x| {
            Ok(x.anti_wrap())
        }),
        "prelu" => check_inputs(
            vec![randn(&[2, 3, 4], r), positive(&[3], r).mul_scalar(0.2)],
            seed,
            |v| v[0].prelu(&v[1]),
        ),
        "sum_axes" => one(vec![randn(&[2, 3, 4], r)], |x| x.sum_axes(&[0, 2], false)),
        "mean_axes" => one(vec![randn(&[2, 3, 4], r)], |x| x.mean_axes(&[1], true)),
        "max_axes" => one(vec![randn(&[2, 3, 4], r)], |x| x.max_axes(&[2], false)),
        "cumsum" => one(vec![randn(&[2, 5], r)], |x| x.cumsum(1)),
        "permute" => one(vec![randn(&[2, 3, 4], r)], |x| {
            x.permute(&[2, 0, 1])?.reshape(&[4, 6])?.transpose(0, 1)
        }),
        "concat" => check_inputs(vec![randn(&[2, 3], r), randn(&[2, 2], r)], seed, |v| {
            Tensor::concat(&[v[0].clone(), v[1].clone()], 1)
        }),
        "narrow" => one(vec![randn(&[3, 6], r)], |x| x.narrow(1, 2, 3)),
        "flip" => one(vec![randn(&[3, 4], r)], |x| x.flip(1)),
        "broadcast_to" => one(vec![randn(&[3, 1], r)], |x| {
            x.unsqueeze(0)?.broadcast_to(&[2, 3, 4])
        }),
        "matmul" => check_inputs(vec![randn(&[3, 4], r), randn(&[4, 2], r)], seed, |v| {
            v[0].matmul(&v[1])
        }),
        "bmm" => check_inputs(
            vec![randn(&[2, 3, 4], r), randn(&[2, 4, 2], r)],
            seed,
            |v| v[0].bmm(&v[1]),
        ),
        "linear" => check_inputs(
            vec![randn(&[2, 3, 4], r), randn(&[4, 5], r), randn(&[5], r)],
            seed,
            |v| v[0].linear(&v[1], Some(&v[2])),
        ),
        "conv2d" => check_inputs(
            vec![
                randn(&[1, 4, 5, 6], r),
                randn(&[2, 2, 2, 3], r),
                randn(&[2], r),
            ],
            seed,
            move |v| v[0].conv2d(&v[1], Some(&v[2]), geom2),
        ),
        "conv_transpose2d" => check_inputs(
            vec![
                randn(&[1, 2, 3, 4], r),
                randn(&[2, 3, 1, 3], r),
                randn(&[3], r),
            ],
            seed,
            |v| {
                v[0].conv_transpose2d(
                    &v[1],
                    Some(&v[2]),
                    Conv2dGeom {
                        stride: (1, 2),
                        padding: (0, 1),
                        ..Default::default()
                    },
                )
            },
        ),
        "conv1d" => check_inputs(
            vec![randn(&[2, 2, 7], r), randn(&[3, 2, 3], r)],
            seed,
            |v| {
                v[0].conv1d(
                    &v[1],
                    None,
                    Conv1dGeom {
                        padding: 2,
                        dilation: 2,
                        ..Default::default()
                    },
                )
            },
        ),
        "conv_transpose1d" => check_inputs(
            vec![randn(&[1, 2, 5], r), randn(&[2, 2, 3], r)],
            seed,
            |v| {
                v[0].conv_transpose1d(
                    &v[1],
                    None,
                    Conv1dGeom {
                        stride: 2,
                        ..Default::default()
                    },
                )
            },
        ),
        "layer_norm" => check_inputs(
            vec![randn(&[2, 3, 5], r), positive(&[5], r), randn(&[5], r)],
            seed,
            |v| layer_norm(&v[0], &v[1], Some(&v[2]), 1e-5),
        ),
        "instance_norm" => check_inputs(
            vec![randn(&[2, 3, 2, 4], r), positive(&[3], r), randn(&[3], r)],
            seed,
            |v| instance_norm(&v[0], &v[1], &v[2], 1e-5),
        ),
        "stft" => one(vec![randn(&[2, 40], r)], |x| stft_t(x, small_stft())),
        "istft" => one(vec![randn(&[1, 6, 17, 2], r)], |x| {
            istft_t(x, 40, small_stft())
        }),
        "mlstm_parallel" => check_inputs(mlstm_streams(seed), seed, |v| {
            mlstm_parallel(
                &v[0],
                &v[1],
                &v[2],
                &v[3],
                &v[4],
                &v[5],
                GatingMode::Exponential,
            )
        }),
        "mlstm_recurrent" => check_inputs(mlstm_streams(seed), seed, |v| {
            mlstm_recurrent(
                &v[0],
                &v[1],
                &v[2],
                &v[3],
                &v[4],
                &v[5],
                GatingMode::ExpInputSigmoidForget,
            )
        }),
        "mlstm_layer" => {
            let mut store = ParamStore::new();
            let layer = MLstmLayer::new(
                &mut store,
                "layer",
                MLstmLayerConfig::new(8, GatingMode::Exponential).with_heads(2),
                r,
            )?;
            jitter(&mut store, 0.2, seed);
            let x = randn(&[2, 5, 8], r);
            check_params(&store, None, seed, |s| layer.forward(s, &x))
        }
        "mlstm_block" => {
            let mut store = ParamStore::new();
            let cfg = MLstmBlockConfig {
                mode: GatingMode::Sigmoid,
                ..MLstmBlockConfig::new(4, 2)
            };
            let block = MLstmBlock::new(&mut store, "block", cfg, r)?;
            jitter(&mut store, 0.2, seed);
            let x = randn(&[1, 6, 4], r);
            check_params(&store, None, seed, |s| block.forward(s, &x))
        }
        "lstm" => {
            let mut store = ParamStore::new();
            let lstm = GroupedLstm::new(&mut store, "lstm", 2, 3, r)?;
            let x = randn(&[2, 5, 6], r);
            check_params(&store, None, seed, |s| lstm.forward(s, &x))
        }
        "model" => model_gradient(seed),
        _ => Err(Error::Config(format!("unknown gradient case `{name}`"))),
    }
}

/// Training loss of the tiny model (C=8, N=1, 17 bins, 12 frames) on a
/// random noisy/clean pair, checked on a sampled share of its parameters.
pub fn model_gradient(seed: u64) -> Result<GradReport> {
    model_gradient_for(&ModelConfig::preset("tiny")?, seed)
}

/// [`model_gradient`] for another architecture, narrowed to 17 bins.
pub fn model_gradient_for(base: &ModelConfig, seed: u64) -> Result<GradReport> {
    let cfg = small_stft();
    let len = 88;
    let mcfg = ModelConfig {
        n_freq: cfg.bins(),
        ..base.clone()
    };
    mcfg.validate()?;
    let mut model = SeModel::<f64>::new(&mcfg, seed)?;
    jitter(&mut model.store, 0.2, seed + 1);
    let mut r = rng(seed + 2);
    let clean_w: Vec<f64> = (0..len).map(|_| r.random_range(-1.0..1.0)).collect();
    let noisy_w: Vec<f64> = clean_w
        .iter()
        .map(|c| c + 0.3 * r.random_range(-1.0..1.0))
        .collect();
    let spectral = |w: &[f64]| -> Result<Spectral<f64>> {
        let pair = crate::dsp::SpectroPair::analyze(
            &Waveform::new(w.to_vec(), SAMPLE_RATE)?,
            cfg,
            crate::dsp::COMPRESSION,
        )?;
        let (mag_c, phase) = pair.tensors::<f64>()?;
        Ok(Spectral {
            mag_c,
            phase,
            wave: Tensor::from_f64_slice(w, &[1, w.len()])?,
        })
    };
    let (clean, noisy) = (spectral(&clean_w)?, spectral(&noisy_w)?);
    let count = ((model.num_params() as f64) * GRAD_PARAM_FRACTION).ceil() as usize;
    let coords = sample_coords(&model.store, count, &mut rng(seed + 3));
    let c = crate::dsp::COMPRESSION;
    param_grad_check(
        &model.store,
        &coords,
        |s| {
            let mut m = model.clone();
            m.store = s.clone();
            let out = m.forward(&noisy.mag_c, &noisy.phase)?;
            let mag_c = noisy.mag_c.mul(&out.mask)?;
            let wave = synthesize(&mag_c, &out.phase, len, cfg, c)?;
            Ok(loss_suite(
                &clean,
                &Spectral {
                    mag_c,
                    phase: out.phase,
                    wave,
                },
                &LossWeights::default(),
                cfg,
                c,
            )?
            .0)
        },
        GRAD_STEP,
        GRAD_REL,
    )
}

/// Cases whose name or group equals `filter`, or all of them.
pub fn gradcheck(
    filter: Option<&str>,
    seed: u64,
) -> Result<Vec<(&'static str, &'static str, GradReport)>> {
    let cases: Vec<_> = GRAD_CASES
        .iter()
        .filter(|(n, g)| filter.is_none_or(|f| f == *n || f == *g))
        .collect();
    if cases.is_empty() {
        return Err(Error::Config(format!(
            "no gradient case or group named `{}`",
            filter.unwrap_or("")
        )));
    }
    cases
        .into_iter()
        .map(|&(n, g)| Ok((n, g, grad_case(n, seed)?)))
        .collect()
}

/// Projected streams in the forgetting regime: log forget gates
/// `logsigmoid(N(2, 1.5^2))` in exponential mode, pre-activations
/// `N(2, 1.5^2)` otherwise.
pub fn forgetting_streams(
    n: usize,
    t: usize,
    d: usize,
    mode: GatingMode,
    seed: u64,
) -> [Vec<f64>; 6] {
    let mut r = rng(seed);
    let ks = 1.0 / (d as f64).sqrt();
    let k = normals(&mut r, n * t * d, ks, 0.0);
    let q = normals(&mut r, n * t * d, 1.0, 0.0);
    let v = normals(&mut r, n * t * d, 1.0, 0.0);
    let i = normals(&mut r, n * t, 1.0, 0.0);
    let f: Vec<f64> = normals(&mut r, n * t, 1.5, 2.0)
        .into_iter()
        .map(|g| {
            if mode == GatingMode::Exponential {
                log_sigmoid(g)
            } else {
                g
            }
        })
        .collect();
    let o = normals(&mut r, n * t * d, 1.0, 0.0);
    [q, k, v, i, f, o]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivCase {
    pub t: usize,
    pub d: usize,
    pub mode: GatingMode,
    pub seed: u64,
    pub diff_f64: f64,
    pub diff_f32: f64,
}

fn max_abs_diff<T: crate::Float>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0, |m, (x, y)| m.max((x.as_f64() - y.as_f64()).abs()))
}

/// Recurrent against parallel form on two sequences, in f64 and f32.
pub fn equiv_case(t: usize, d: usize, mode: GatingMode, seed: u64) -> Result<EquivCase> {
    let s = forgetting_streams(2, t, d, mode, seed);
    let dims = (2, t, d);
    let rec = recurrent_sequence(&s[0], &s[1], &s[2], &s[3], &s[4], &s[5], dims, mode)?;
    let par = parallel_raw(&s[0], &s[1], &s[2], &s[3], &s[4], &s[5], dims, mode);
    let c: Vec<Vec<f32>> = s
        .iter()
        .map(|v| v.iter().map(|&x| x as f32).collect())
        .collect();
    let rec32 = recurrent_sequence(&c[0], &c[1], &c[2], &c[3], &c[4], &c[5], dims, mode)?;
    let par32 = parallel_raw(&c[0], &c[1], &c[2], &c[3], &c[4], &c[5], dims, mode);
    Ok(EquivCase {
        t,
        d,
        mode,
        seed,
        diff_f64: max_abs_diff(&rec, &par),
        diff_f32: max_abs_diff(&rec32, &par32),
    })
}

/// `seeds` cases per mode at fixed `t` and `d`.
pub fn equiv_check(
    t: usize,
    d: usize,
    seeds: usize,
    modes: &[GatingMode],
    seed: u64,
) -> Result<Vec<EquivCase>> {
    let mut out = Vec::new();
    for &mode in modes {
        for s in 0..seeds as u64 {
            out.push(equiv_case(t, d, mode, seed.wrapping_add(s))?);
        }
    }
    Ok(out)
}

/// `n` cases with `T` in `[1, max_t]`, `d` in `[1, max_d]`, cycling over all gating modes.
pub fn equiv_random(n: usize, max_t: usize, max_d: usize, seed: u64) -> Result<Vec<EquivCase>> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let t = r.random_range(1..=max_t);
            let d = r.random_range(1..=max_d);
            equiv_case(t, d, GatingMode::ALL[i % GatingMode::ALL.len()], r.random())
        })
        .collect()
}

/// Max abs error of STFT then iSTFT over `n` random signals of 400 to 48000 samples.
pub fn roundtrip_check(n: usize, cfg: StftConfig, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let len = r.random_range(400..=48_000);
        let x: Vec<f64> = (0..len).map(|_| r.random_range(-1.0..1.0)).collect();
        let w = Waveform::new(x, SAMPLE_RATE)?;
        let y = istft(&stft(&w, cfg)?, len, cfg)?;
        worst = worst.max(max_abs_diff(&w.samples, &y.samples));
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskCheck {
    /// Relative error of the unit mask against the noisy magnitude.
    pub identity_rel: f64,
    /// Largest output of the zero mask.
    pub zero_max: f64,
    /// Relative error of random masks against the direct formula, slice and tensor paths.
    pub random_rel: f64,
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| {
        m.max((x - y).abs() / y.abs().max(f64::MIN_POSITIVE))
    })
}

pub fn mask_check(seed: u64) -> Result<MaskCheck> {
    let c = crate::dsp::COMPRESSION;
    let mut r = rng(seed);
    let mag: Vec<f64> = (0..2000).map(|_| r.random_range(1e-4..50.0)).collect();
    let mag_c: Vec<f64> = mag.iter().map(|m| m.powf(c)).collect();
    let identity_rel = max_rel(&apply_mask(&mag_c, &vec![1.0; mag.len()], c)?, &mag);
    let zero_max = apply_mask(&mag_c, &vec![0.0; mag.len()], c)?
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let mask: Vec<f64> = (0..mag.len()).map(|_| r.random_range(0.0..2.0)).collect();
    let direct: Vec<f64> = mag
        .iter()
        .zip(&mask)
        .map(|(y, m)| (y.powf(c) * m).powf(1.0 / c))
        .collect();
    let slice = apply_mask(&mag_c, &mask, c)?;
    let shape = [1, 40, 50];
    let tensor = apply_mask_t(
        &Tensor::<f64>::from_vec(mag_c.clone(), &shape)?,
        &Tensor::from_vec(mask, &shape)?,
        c,
    )?
    .to_vec();
    Ok(MaskCheck {
        identity_rel,
        zero_max,
        random_rel: max_rel(&slice, &direct).max(max_rel(&tensor, &direct)),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub name: &'static str,
    pub cases: usize,
    pub violations: usize,
}

impl ProbeResult {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.cases > 0
    }
}

/// Perturbs every feature of input step `t` and lists the `(step, channel)`
/// outputs that changed.
fn moved_outputs<F>(x: &Tensor<f64>, step: usize, seed: u64, f: &F) -> Result<Vec<(usize, usize)>>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let base = f(x)?;
    let d = x.dim(2);
    let mut data = x.to_vec();
    for (c, delta) in normals(&mut rng(seed + step as u64), d, 0.5, 0.0)
        .into_iter()
        .enumerate()
    {
        data[step * d + c] += delta;
    }
    let moved = f(&Tensor::from_vec(data, x.shape())?)?;
    let width = base.dim(2);
    Ok(base
        .data()
        .iter()
        .zip(moved.data())
        .enumerate()
        .filter(|(_, (a, b))| a != b)
        .map(|(i, _)| (i / width, i % width))
        .collect())
}

/// A unidirectional block never lets step `t` affect outputs before `t`,
/// and the gates and projections of a layer read only their own step.
pub fn causality_probe(t: usize, d: usize, seed: u64) -> Result<Vec<ProbeResult>> {
    let mut r = rng(seed);
    let mut store = ParamStore::<f64>::new();
    let block = MLstmBlock::new(&mut store, "block", MLstmBlockConfig::new(d, 2), &mut r)?;
    jitter(&mut store, 0.1, seed);
    let x = randn(&[1, t, d], &mut r);
    let mut causal = ProbeResult {
        name: "block causality",
        cases: 0,
        violations: 0,
    };
    no_grad(|| -> Result<()> {
        for step in 0..t {
            let moved = moved_outputs(&x, step, seed, &|x| block.forward(&store, x))?;
            causal.cases += 1;
            if moved.iter().any(|&(s, _)| s < step) || !moved.iter().any(|&(s, _)| s == step) {
                causal.violations += 1;
            }
        }
        Ok(())
    })?;

    let mut lstore = ParamStore::<f64>::new();
    let layer = MLstmLayer::new(
        &mut lstore,
        "layer",
        MLstmLayerConfig::new(d, GatingMode::Exponential),
        &mut r,
    )?;
    jitter(&mut lstore, 0.1, seed + 1);
    let mut pointwise = ProbeResult {
        name: "gates read only the current step",
        cases: 0,
        violations: 0,
    };
    no_grad(|| -> Result<()> {
        for step in 0..t {
            let streams = |x: &Tensor<f64>| -> Result<Tensor<f64>> {
                let s = layer.streams(&lstore, x)?;
                let (b, n, h) = (x.dim(0), x.dim(1), layer.cfg.heads);
                let per = |v: &Tensor<f64>| -> Result<Tensor<f64>> {
                    let w = v.numel() / (b * h * n);
                    v.reshape(&[b, h, n, w])?
                        .permute(&[0, 2, 1, 3])?
                        .reshape(&[b, n, h * w])
                };
                let gates = Tensor::concat(&[per(&s.i_pre)?, per(&s.f_pre)?], 2)?;
                Tensor::concat(&[per(&s.q)?, per(&s.k)?, per(&s.v)?, per(&s.o)?, gates], 2)
            };
            let moved = moved_outputs(&x, step, seed, &streams)?;
            pointwise.cases += 1;
            if moved.iter().any(|&(s, _)| s != step) || moved.is_empty() {
                pointwise.violations += 1;
            }
        }
        Ok(())
    })?;
    Ok(vec![causal, pointwise])
}

/// Perturbing one head's projection or gate weights leaves every other
/// head's output bitwise unchanged.
pub fn head_isolation_probe(t: usize, d: usize, seed: u64) -> Result<ProbeResult> {
    let mut r = rng(seed);
    let mut store = ParamStore::<f64>::new();
    let cfg = MLstmLayerConfig::new(d, GatingMode::Exponential);
    let heads = cfg.heads;
    let layer = MLstmLayer::new(&mut store, "layer", cfg, &mut r)?;
    jitter(&mut store, 0.1, seed);
    let dh = d / heads;
    let x = randn(&[1, t, d], &mut r);
    let base = no_grad(|| layer.forward(&store, &x))?;
    let mut res = ProbeResult {
        name: "head isolation",
        cases: 0,
        violations: 0,
    };
    let ids = [
        layer.q.weight,
        layer.k.weight,
        layer.v.weight,
        layer.o.weight,
        layer.igate_w,
        layer.fgate_w,
    ];
    for head in 0..heads {
        for &pid in &ids {
            let mut s = store.clone();
            let shape = s.get(pid).shape().to_vec();
            let mut w = s.get(pid).to_vec();
            if pid == layer.igate_w || pid == layer.fgate_w {
                for row in 0..d {
                    w[row * heads + head] += 0.3;
                }
            } else {
                let per = w.len() / heads;
                for v in &mut w[head * per..(head + 1) * per] {
                    *v += 0.3;
                }
            }
            s.set(pid, Tensor::from_vec(w, &shape)?)?;
            let y = no_grad(|| layer.forward(&s, &x))?;
            res.cases += 1;
            let leaked = base
                .data()
                .iter()
                .zip(y.data())
                .enumerate()
                .any(|(i, (a, b))| (i % d) / dh != head && a != b);
            let own = base
                .data()
                .iter()
                .zip(y.data())
                .enumerate()
                .any(|(i, (a, b))| (i % d) / dh == head && a != b);
            if leaked || !own {
                res.violations += 1;
            }
        }
    }
    Ok(res)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCountRow {
    pub preset: &'static str,
    pub total: usize,
    pub target_m: Option<f64>,
}

impl ParamCountRow {
    pub fn rel_err(&self) -> Option<f64> {
        self.target_m
            .map(|t| (self.total as f64 / 1e6 - t).abs() / t)
    }
}

pub fn param_counts() -> Result<Vec<ParamCountRow>> {
    PRESETS
        .iter()
        .map(|&(name, target_m, _)| {
            Ok(ParamCountRow {
                preset: name,
                total: count_parameters(&ModelConfig::preset(name)?)?,
                target_m,
            })
        })
        .collect()
}

/// Presets of the ablation grid.
pub const ABLATION_PRESETS: [&str; 9] = [
    "xlstm-senet",
    "ef3",
    "ef2",
    "no-bias",
    "unidirectional",
    "sigmoid-gating",
    "lstm-layer",
    "lstm-block",
    "xlstm-senet2",
];

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub preset: &'static str,
    pub params: usize,
    /// Full-size forward produced `[1, T, F]` mask and phase.
    pub shapes_ok: bool,
    /// Gradient check of a narrowed copy (8 channels, 17 bins).
    pub grad: GradReport,
}

/// Builds each ablation preset, runs it forward at full width, then checks
/// gradients of a narrowed copy that keeps the preset's switches.
pub fn ablation_check(preset: &'static str, seed: u64) -> Result<AblationResult> {
    let full = ModelConfig::preset(preset)?;
    let model = SeModel::<f32>::new(&full, seed)?;
    let (t, f) = (4, full.n_freq);
    let mut r = rng(seed);
    let mag = Tensor::<f32>::uniform(&[1, t, f], 0.0, 1.5, &mut r);
    let ph = Tensor::<f32>::uniform(&[1, t, f], -3.0, 3.0, &mut r);
    let out = no_grad(|| model.forward(&mag, &ph))?;
    let shapes_ok = out.mask.shape() == [1, t, f]
        && out.phase.shape() == [1, t, f]
        && out.mask.all_finite()
        && out.phase.all_finite();

    let blocks = if full.num_tf_blocks > 4 { 2 } else { 1 };
    let small = ModelConfig {
        channels: 8,
        num_tf_blocks: blocks,
        n_freq: 17,
        ..full.clone()
    };
    let mut m = SeModel::<f64>::new(&small, seed)?;
    jitter(&mut m.store, 0.2, seed + 1);
    let mag = Tensor::<f64>::uniform(&[1, 8, 17], 0.05, 1.5, &mut r);
    let ph = Tensor::<f64>::uniform(&[1, 8, 17], -3.0, 3.0, &mut r);
    let grad = check_params(&m.store, Some(80), seed, |s| {
        let mut mm = m.clone();
        mm.store = s.clone();
        let o = mm.forward(&mag, &ph)?;
        Tensor::concat(&[o.mask, o.phase.sin()], 2)
    })?;
    Ok(AblationResult {
        preset,
        params: model.num_params(),
        shapes_ok,
        grad,
    })
}
