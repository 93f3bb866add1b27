mod common;

use common::{jitter, rng};
use proptest::prelude::*;
use rand::Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use xlstm_se::dsp::{snr_db, stft, SpectroPair, StftConfig, Waveform, SAMPLE_RATE};
use xlstm_se::enhance::Spectral;
use xlstm_se::model::{ModelConfig, SeModel};
use xlstm_se::nn::{param_grad_check, sample_coords};
use xlstm_se::train::loss::{compress_complex, consistency_loss, phase_loss, CONSISTENCY_EPS};
use xlstm_se::train::{
    load_trained, loss_suite, toy_dataset, train_toy, LossWeights, TrainConfig, CHECKPOINT_FILE,
    REPORT_FILE, TOY_SNRS_DB,
};
use xlstm_se::{Error, Tensor};

const C: f64 = 0.3;

fn small_stft() -> StftConfig {
    StftConfig { n_fft: 32, hop: 8 }
}

fn signal(len: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..len).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// Spectral triple of a real waveform, batch of one.
fn analyzed(x: &[f64], cfg: StftConfig) -> Spectral<f64> {
    let pair =
        SpectroPair::analyze(&Waveform::new(x.to_vec(), SAMPLE_RATE).unwrap(), cfg, C).unwrap();
    let (mag_c, phase) = pair.tensors::<f64>().unwrap();
    Spectral {
        mag_c,
        phase,
        wave: Tensor::from_f64_slice(x, &[1, x.len()]).unwrap(),
    }
}

/// Arbitrary (generally inconsistent) prediction with the clean geometry.
fn random_prediction(clean: &Spectral<f64>, seed: u64) -> Spectral<f64> {
    let mut r = rng(seed);
    let sh = clean.mag_c.shape().to_vec();
    let n = clean.mag_c.numel();
    let mag: Vec<f64> = (0..n).map(|_| r.random_range(0.05..2.0)).collect();
    let ph: Vec<f64> = (0..n).map(|_| r.random_range(-3.1..3.1)).collect();
    let len = clean.wave.dim(1);
    Spectral {
        mag_c: Tensor::from_vec(mag, &sh).unwrap(),
        phase: Tensor::from_vec(ph, &sh).unwrap(),
        wave: Tensor::from_vec(signal(len, seed + 1), &[1, len]).unwrap(),
    }
}

fn wrap_dist(d: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    (d - tau * (d / tau).round()).abs()
}

/// Every term by explicit loops over plain vectors.
fn direct_terms(clean: &Spectral<f64>, pred: &Spectral<f64>, cfg: StftConfig) -> [f64; 5] {
    let (t, f) = (clean.mag_c.dim(1), clean.mag_c.dim(2));
    let (cm, cp) = (clean.mag_c.to_vec(), clean.phase.to_vec());
    let (pm, pp) = (pred.mag_c.to_vec(), pred.phase.to_vec());
    let (cw, pw) = (clean.wave.to_vec(), pred.wave.to_vec());
    let n = (t * f) as f64;

    let time = cw.iter().zip(&pw).map(|(a, b)| (a - b).abs()).sum::<f64>() / cw.len() as f64;
    let mag = cm
        .iter()
        .zip(&pm)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n;
    let mut complex = 0.0;
    for j in 0..t * f {
        complex += (pm[j] * pp[j].cos() - cm[j] * cp[j].cos()).powi(2);
        complex += (pm[j] * pp[j].sin() - cm[j] * cp[j].sin()).powi(2);
    }
    complex /= 2.0 * n;

    let at = |v: &[f64], i: usize, k: usize| v[i * f + k];
    let mut ip = 0.0;
    let mut gd = 0.0;
    let mut iaf = 0.0;
    for i in 0..t {
        for k in 0..f {
            ip += wrap_dist(at(&pp, i, k) - at(&cp, i, k));
            if k + 1 < f {
                gd += wrap_dist(
                    (at(&pp, i, k + 1) - at(&pp, i, k)) - (at(&cp, i, k + 1) - at(&cp, i, k)),
                );
            }
            if i + 1 < t {
                iaf += wrap_dist(
                    (at(&pp, i + 1, k) - at(&pp, i, k)) - (at(&cp, i + 1, k) - at(&cp, i, k)),
                );
            }
        }
    }
    let phase = ip / n + gd / (t * (f - 1)) as f64 + iaf / ((t - 1) * f) as f64;

    let lin: Vec<Complex<f64>> = pm
        .iter()
        .zip(&pp)
        .map(|(m, p)| Complex::from_polar(m.powf(1.0 / C), *p))
        .collect();
    let back = stft(&Waveform::new(pw.clone(), SAMPLE_RATE).unwrap(), cfg).unwrap();
    let g = |z: Complex<f64>| z * (z.norm_sqr() + CONSISTENCY_EPS).powf((C - 1.0) / 2.0);
    let mut consistency = 0.0;
    for j in 0..t * f {
        let d = g(Complex::new(back.re[j], back.im[j])) - g(lin[j]);
        consistency += d.norm_sqr();
    }
    consistency /= 2.0 * n;
    [time, mag, complex, phase, consistency]
}

#[test]
fn terms_match_direct_formulas() {
    let cfg = small_stft();
    for seed in 0..4 {
        let clean = analyzed(&signal(88, seed), cfg);
        let pred = random_prediction(&clean, 100 + seed);
        let (total, terms) = loss_suite(&clean, &pred, &LossWeights::default(), cfg, C).unwrap();
        let want = direct_terms(&clean, &pred, cfg);
        for (name, (got, want)) in ["time", "mag", "complex", "phase", "consistency"]
            .iter()
            .zip(terms.as_array().iter().zip(want))
        {
            assert!(
                (got - want).abs() <= 1e-12 * want.abs().max(1.0),
                "{name}: {got} vs {want}"
            );
        }
        let w = LossWeights::default().as_array();
        let weighted: f64 = w.iter().zip(want).map(|(a, b)| a * b).sum();
        assert!(
            (total.item() - weighted).abs() < 1e-12,
            "{} vs {weighted}",
            total.item()
        );
        assert_eq!(terms.total, total.item());
    }
}

#[test]
fn perfect_prediction_has_zero_loss() {
    let cfg = small_stft();
    let clean = analyzed(&signal(120, 7), cfg);
    let (_, terms) = loss_suite(&clean, &clean, &LossWeights::default(), cfg, C).unwrap();
    for (name, v) in ["time", "mag", "complex", "phase", "consistency"]
        .iter()
        .zip(terms.as_array())
    {
        assert!((0.0..1e-20).contains(&v), "{name}: {v}");
    }
    let audio = analyzed(&signal(16000, 8), StftConfig::default());
    let (_, terms) = loss_suite(
        &audio,
        &audio,
        &LossWeights::default(),
        StftConfig::default(),
        C,
    )
    .unwrap();
    assert!(terms.total < 1e-20, "{terms}");
}

#[test]
fn phase_offsets_by_whole_turns_cost_nothing() {
    let cfg = small_stft();
    let clean = analyzed(&signal(88, 9), cfg);
    let turns: Vec<f64> = (0..clean.phase.numel())
        .map(|j| std::f64::consts::TAU * ((j % 5) as f64 - 2.0))
        .collect();
    let shifted = clean
        .phase
        .add(&Tensor::from_vec(turns, clean.phase.shape()).unwrap())
        .unwrap();
    let v = phase_loss(&clean.phase, &shifted).unwrap().item();
    assert!(v.abs() < 1e-12, "{v}");
    let half = clean.phase.add_scalar(std::f64::consts::PI);
    let v = phase_loss(&clean.phase, &half).unwrap().item();
    assert!((v - std::f64::consts::PI).abs() < 1e-12, "{v}");
}

#[test]
fn consistent_spectra_have_zero_consistency_loss() {
    let cfg = small_stft();
    let clean = analyzed(&signal(64, 10), cfg);
    assert!(consistency_loss(&clean, cfg, C).unwrap().item() < 1e-20);
    let pred = random_prediction(&clean, 11);
    assert!(consistency_loss(&pred, cfg, C).unwrap().item() > 1e-3);
}

#[test]
fn compressed_complex_keeps_angle() {
    let z = Tensor::from_vec(vec![3.0, 4.0, 0.0, 0.0, -1.0, 0.0], &[3, 2]).unwrap();
    let g = compress_complex(&z, C).unwrap().to_vec();
    let m = (25.0 + CONSISTENCY_EPS).powf((C - 1.0) / 2.0);
    assert!((g[0] - 3.0 * m).abs() < 1e-12 && (g[1] - 4.0 * m).abs() < 1e-12);
    assert_eq!(&g[2..4], &[0.0, 0.0]);
    assert!((g[4] + 1.0).abs() < 1e-8 && g[5] == 0.0);
}

#[test]
fn loss_rejects_misaligned_shapes() {
    let cfg = small_stft();
    let a = analyzed(&signal(88, 12), cfg);
    let b = analyzed(&signal(96, 13), cfg);
    assert!(matches!(
        loss_suite(&a, &b, &LossWeights::default(), cfg, C),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn weights_are_validated() {
    let zero = LossWeights {
        time: 0.0,
        mag: 0.0,
        complex: 0.0,
        phase: 0.0,
        consistency: 0.0,
    };
    assert!(matches!(zero.validate(), Err(Error::Config(_))));
    assert!(LossWeights {
        mag: -1.0,
        ..LossWeights::default()
    }
    .validate()
    .is_err());
    assert!(LossWeights {
        phase: f64::NAN,
        ..LossWeights::default()
    }
    .validate()
    .is_err());
    assert_eq!(LossWeights::default().as_array(), [0.2, 0.9, 0.1, 0.3, 0.1]);
    assert_eq!(LossWeights::METRIC_GAN, 0.0);
}

#[test]
fn zero_weight_terms_stay_out_of_the_total() {
    let cfg = small_stft();
    let clean = analyzed(&signal(88, 14), cfg);
    let pred = random_prediction(&clean, 15);
    let only_mag = LossWeights {
        time: 0.0,
        mag: 1.0,
        complex: 0.0,
        phase: 0.0,
        consistency: 0.0,
    };
    let (total, terms) = loss_suite(&clean, &pred, &only_mag, cfg, C).unwrap();
    assert_eq!(total.item(), terms.mag);
    assert!(terms.phase > 0.0 && terms.time > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn terms_are_non_negative_and_vanish_only_at_the_target(seed in 0u64..10_000, len in 40usize..140) {
        let cfg = small_stft();
        let clean = analyzed(&signal(len, seed), cfg);
        let pred = random_prediction(&clean, seed ^ 0xabc);
        let (_, terms) = loss_suite(&clean, &pred, &LossWeights::default(), cfg, C).unwrap();
        for v in terms.as_array() {
            prop_assert!(v > 0.0);
        }
        let (_, same) = loss_suite(&clean, &clean, &LossWeights::default(), cfg, C).unwrap();
        for v in same.as_array() {
            prop_assert!((0.0..1e-20).contains(&v));
        }
    }
}

fn tiny(n_freq: usize) -> ModelConfig {
    ModelConfig {
        n_freq,
        ..ModelConfig::preset("tiny").unwrap()
    }
}

#[test]
fn training_loss_gradient_matches_finite_differences() {
    let cfg = small_stft();
    let mut m = SeModel::<f64>::new(&tiny(17), 40).unwrap();
    jitter(&mut m.store, 0.2, 41);
    let clean = analyzed(&signal(88, 42), cfg);
    let noisy_wave: Vec<f64> = clean
        .wave
        .to_vec()
        .iter()
        .zip(signal(88, 43))
        .map(|(c, n)| c + 0.3 * n)
        .collect();
    let noisy = analyzed(&noisy_wave, cfg);
    let loss = |s: &xlstm_se::nn::ParamStore<f64>| {
        let mut mm = m.clone();
        mm.store = s.clone();
        let out = mm.forward(&noisy.mag_c, &noisy.phase)?;
        let mag_c = noisy.mag_c.mul(&out.mask)?;
        let wave = xlstm_se::enhance::synthesize(&mag_c, &out.phase, 88, cfg, C)?;
        let pred = Spectral {
            mag_c,
            phase: out.phase,
            wave,
        };
        Ok(loss_suite(&clean, &pred, &LossWeights::default(), cfg, C)?.0)
    };
    let coords = sample_coords(&m.store, 150, &mut rng(44));
    let rep = param_grad_check(&m.store, &coords, loss, 1e-5, 1e-4).unwrap();
    assert!(rep.checked > 75, "{rep}");
    assert!(rep.passed(), "{rep}");
}

#[test]
fn toy_data_is_deterministic() {
    let a = toy_dataset(5, 3, 0.5).unwrap();
    let b = toy_dataset(5, 3, 0.5).unwrap();
    assert_eq!(a, b);
    let c = toy_dataset(6, 3, 0.5).unwrap();
    assert_ne!(a[0].clean, c[0].clean);
    let longer = toy_dataset(5, 5, 0.5).unwrap();
    assert_eq!(&longer[..3], &a[..]);
}

#[test]
fn toy_mixtures_hit_the_requested_snr() {
    let data = toy_dataset(1, 12, 1.0).unwrap();
    let mut seen = std::collections::BTreeSet::new();
    for ex in &data {
        assert_eq!(ex.clean.len(), 16000);
        assert_eq!(ex.noisy.len(), ex.clean.len());
        assert!(TOY_SNRS_DB.contains(&ex.snr_db));
        seen.insert(ex.snr_db as i64);
        let e_clean: f64 = ex.clean.samples.iter().map(|v| v * v).sum();
        let e_noise: f64 = ex.noise().iter().map(|v| v * v).sum();
        let snr = 10.0 * (e_clean / e_noise).log10();
        assert!((snr - ex.snr_db).abs() < 0.01, "{snr} vs {}", ex.snr_db);
        assert!((snr_db(&ex.clean.samples, &ex.noisy.samples) - ex.snr_db).abs() < 0.01);
        assert!(ex.noisy.peak() <= 0.9 + 1e-12 && ex.clean.peak() <= 0.9 + 1e-12);
    }
    assert!(seen.len() >= 3, "{seen:?}");
}

#[test]
fn toy_clean_signal_is_band_limited() {
    let mut planner = FftPlanner::<f64>::new();
    for ex in toy_dataset(2, 6, 2.0).unwrap() {
        let n = ex.clean.len();
        let fft = planner.plan_fft_forward(n);
        let mut buf: Vec<Complex<f64>> = ex
            .clean
            .samples
            .iter()
            .map(|&v| Complex::new(v, 0.0))
            .collect();
        fft.process(&mut buf);
        let hz = |k: usize| k as f64 * f64::from(SAMPLE_RATE) / n as f64;
        let total: f64 = buf[..=n / 2].iter().map(|z| z.norm_sqr()).sum();
        let high: f64 = (0..=n / 2)
            .filter(|&k| hz(k) > 4000.0)
            .map(|k| buf[k].norm_sqr())
            .sum();
        assert!(high < 0.01 * total, "{}", high / total);
        let speech: f64 = (0..=n / 2)
            .filter(|&k| (90.0..=3900.0).contains(&hz(k)))
            .map(|k| buf[k].norm_sqr())
            .sum();
        assert!(speech > 0.95 * total, "{}", speech / total);
    }
}

fn quick(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        n_train: 2,
        item_s: 0.2,
        n_eval: 1,
        crop_s: 0.1,
        batch: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_steps_writes_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let r = train_toy::<f32>(&ModelConfig::preset("tiny").unwrap(), &quick(0), dir.path()).unwrap();
    assert!(r.steps.is_empty());
    assert_eq!(r.initial, r.final_loss);
    assert!(r.initial.total.is_finite() && r.initial.total > 0.0);
    assert!(dir.path().join(CHECKPOINT_FILE).exists());
    let loaded = load_trained::<f32>(dir.path()).unwrap();
    let mut init = SeModel::<f32>::new(&ModelConfig::preset("tiny").unwrap(), 0).unwrap();
    init.force_unit_mask().unwrap();
    for ((na, a), (nb, b)) in loaded.store.iter().zip(init.store.iter()) {
        assert_eq!(na, nb);
        assert_eq!(a.to_vec(), b.to_vec(), "{na}");
    }
}

#[test]
fn training_is_deterministic_and_reported() {
    let model = ModelConfig::preset("tiny").unwrap();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = train_toy::<f64>(&model, &quick(3), d1.path()).unwrap();
    let b = train_toy::<f64>(&model, &quick(3), d2.path()).unwrap();
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.final_loss, b.final_loss);
    assert_eq!(a.steps.len(), 3);
    assert_ne!(a.initial, a.final_loss);

    let text = std::fs::read_to_string(d1.path().join(REPORT_FILE)).unwrap();
    let lines: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 1 + 3 + 2);
    assert_eq!(lines[0]["kind"], "initial");
    for (k, rec) in lines[1..4].iter().enumerate() {
        assert_eq!(rec["step"], k + 1);
        for key in ["time", "mag", "complex", "phase", "consistency", "total"] {
            assert!(rec[key].is_f64(), "{key}");
        }
    }
    assert_eq!(lines[4]["kind"], "summary");
    assert_eq!(lines[5]["kind"], "eval");
    assert!(lines[5]["snr_improvement_db"].is_f64());
}

#[test]
fn divergence_aborts_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        lr: 1e300,
        ..quick(4)
    };
    let e = train_toy::<f64>(&ModelConfig::preset("tiny").unwrap(), &cfg, dir.path()).unwrap_err();
    assert!(matches!(e, Error::Numeric(_)), "{e}");
    assert!(e.to_string().contains("diverged at step"), "{e}");
}
