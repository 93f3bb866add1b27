mod common;

use std::f64::consts::PI;

use common::{jitter, max_abs_diff, rng};
use xlstm_se::dsp::{SpectroPair, StftConfig, Waveform, COMPRESSION, SAMPLE_RATE};
use xlstm_se::model::{
    count_parameters, halved_freq, learnable_sigmoid, ModelConfig, SeModel, PRESETS,
};
use xlstm_se::nn::{param_grad_check, sample_coords};
use xlstm_se::tensor::{atan2_principal, no_grad};
use xlstm_se::Tensor;

fn inputs(b: usize, t: usize, f: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut r = rng(seed);
    let mag = Tensor::uniform(&[b, t, f], 0.0, 1.5, &mut r);
    let ph = Tensor::uniform(&[b, t, f], -PI, PI, &mut r);
    (mag, ph)
}

fn tiny(n_freq: usize) -> ModelConfig {
    ModelConfig {
        n_freq,
        ..ModelConfig::preset("tiny").unwrap()
    }
}

#[test]
fn two_second_clip_shapes() {
    let mut r = rng(1);
    let samples: Vec<f64> = (0..32000)
        .map(|_| rand::Rng::random_range(&mut r, -0.5..0.5))
        .collect();
    let w = Waveform::new(samples, SAMPLE_RATE).unwrap();
    let pair = SpectroPair::analyze(&w, StftConfig::default(), COMPRESSION).unwrap();
    let (mag, ph) = pair.tensors::<f32>().unwrap();
    assert_eq!(mag.shape(), &[1, 321, 201]);
    let m = SeModel::<f32>::new(&ModelConfig::preset("tiny").unwrap(), 0).unwrap();
    let out = no_grad(|| m.forward(&mag, &ph)).unwrap();
    assert_eq!(out.mask.shape(), &[1, 321, 201]);
    assert_eq!(out.phase.shape(), &[1, 321, 201]);
    assert!(out.mask.all_finite() && out.phase.all_finite());
}

#[test]
fn shape_contract_from_31_frames() {
    let m = SeModel::<f64>::new(&tiny(201), 3).unwrap();
    for t in [31, 40] {
        let (mag, ph) = inputs(1, t, 201, t as u64);
        let out = no_grad(|| m.forward(&mag, &ph)).unwrap();
        assert_eq!(out.mask.shape(), mag.shape());
        assert_eq!(out.phase.shape(), mag.shape());
    }
}

#[test]
fn encoder_halves_frequency() {
    assert_eq!(halved_freq(201), 101);
    assert_eq!(halved_freq(17), 9);
    let cfg = ModelConfig {
        channels: 64,
        num_tf_blocks: 1,
        expansion: 1,
        ..ModelConfig::default()
    };
    let m = SeModel::<f32>::new(&cfg, 0).unwrap();
    let (mag, ph) = inputs(1, 16, 201, 2);
    let x = Tensor::concat(
        &[
            mag.cast::<f32>().unsqueeze(1).unwrap(),
            ph.cast::<f32>().unsqueeze(1).unwrap(),
        ],
        1,
    )
    .unwrap();
    let h = no_grad(|| m.encoder.forward(&m.store, &x)).unwrap();
    assert_eq!(h.shape(), &[1, 64, 16, 101]);
}

#[test]
fn wrong_bin_count_is_a_geometry_error() {
    let m = SeModel::<f64>::new(&tiny(17), 0).unwrap();
    let (mag, ph) = inputs(1, 8, 19, 0);
    assert!(matches!(
        m.forward(&mag, &ph),
        Err(xlstm_se::Error::Geometry(_))
    ));
}

#[test]
fn dense_receptive_field_is_31_frames() {
    let cfg = ModelConfig {
        instance_norm: false,
        ..tiny(17)
    };
    let m = SeModel::<f64>::new(&cfg, 5).unwrap();
    assert_eq!(m.encoder.dense.receptive_field(), 31);
    let (t, f) = (48, 17);
    let (mag, ph) = inputs(1, t, f, 6);
    let enc = |mag: &Tensor<f64>| {
        let x = Tensor::concat(&[mag.unsqueeze(1).unwrap(), ph.unsqueeze(1).unwrap()], 1).unwrap();
        no_grad(|| m.encoder.forward(&m.store, &x)).unwrap()
    };
    let base = enc(&mag);
    let fp = base.dim(3);
    for probe in [0, 17, 24, 47] {
        let mut d = mag.to_vec();
        for k in 0..f {
            d[probe * f + k] += 0.3 + 0.05 * k as f64;
        }
        let out = enc(&Tensor::from_vec(d, &[1, t, f]).unwrap());
        let (a, b) = (base.data(), out.data());
        for frame in 0..t {
            let changed = (0..m.cfg.channels)
                .flat_map(|c| (0..fp).map(move |q| (c * t + frame) * fp + q))
                .any(|i| a[i] != b[i]);
            let inside = frame.abs_diff(probe) <= 15;
            assert!(!changed || inside, "probe {probe} reached frame {frame}");
            if frame.abs_diff(probe) == 15 {
                assert!(changed, "probe {probe} did not reach frame {frame}");
            }
        }
    }
}

#[test]
fn zeroed_stack_is_the_identity() {
    for preset in ["tiny", "unidirectional"] {
        let cfg = ModelConfig {
            n_freq: 17,
            channels: 8,
            num_tf_blocks: 2,
            ..ModelConfig::preset(preset).unwrap()
        };
        let mut m = SeModel::<f64>::new(&cfg, 7).unwrap();
        let ids = m.stack_identity_params();
        m.zero_params(&ids).unwrap();
        let mut r = rng(8);
        let x = Tensor::<f64>::randn(&[2, 8, 10, 6], 1.0, &mut r);
        for b in &m.blocks {
            let y = no_grad(|| b.forward(&m.store, &x)).unwrap();
            assert_eq!(y.data(), x.data(), "{preset}");
        }
    }
}

#[test]
fn tf_block_preserves_shape() {
    let cfg = ModelConfig {
        n_freq: 11,
        ..ModelConfig::preset("tiny").unwrap()
    };
    let m = SeModel::<f64>::new(&cfg, 9).unwrap();
    let x = Tensor::<f64>::randn(&[2, 8, 10, 6], 1.0, &mut rng(10));
    let y = no_grad(|| m.blocks[0].forward(&m.store, &x)).unwrap();
    assert_eq!(y.shape(), x.shape());
}

#[test]
fn time_path_does_not_mix_frequencies() {
    let mut m = SeModel::<f64>::new(&tiny(17), 11).unwrap();
    jitter(&mut m.store, 0.1, 12);
    let freq_ids = m.blocks[0].freq.identity_params();
    m.zero_params(&freq_ids).unwrap();
    let (b, c, t, f) = (1, 8, 10, 6);
    let x = Tensor::<f64>::randn(&[b, c, t, f], 1.0, &mut rng(13));
    let base = no_grad(|| m.blocks[0].forward(&m.store, &x)).unwrap();
    for fq in 0..f {
        let mut d = x.to_vec();
        for ch in 0..c {
            d[(ch * t + 3) * f + fq] += 0.7 + 0.1 * ch as f64;
        }
        let y = no_grad(|| m.blocks[0].forward(&m.store, &Tensor::from_vec(d, x.shape()).unwrap()))
            .unwrap();
        let mut moved = false;
        for ch in 0..c {
            for tt in 0..t {
                for ff in 0..f {
                    let i = (ch * t + tt) * f + ff;
                    let diff = y.data()[i] != base.data()[i];
                    assert!(!diff || ff == fq, "bin {fq} leaked into bin {ff}");
                    moved |= diff;
                }
            }
        }
        assert!(moved);
    }
}

#[test]
fn zero_mask_preactivation_gives_unit_mask() {
    let alpha = Tensor::<f64>::ones(&[201]);
    let m = learnable_sigmoid(&Tensor::zeros(&[1, 4, 201]), &alpha, 2.0).unwrap();
    assert!(m.data().iter().all(|&v| v == 1.0));

    let mut model = SeModel::<f64>::new(&tiny(17), 14).unwrap();
    let out = model.mask.out.clone();
    model.zero_params(&[out.weight, out.bias]).unwrap();
    let (mag, ph) = inputs(1, 6, 17, 15);
    let y = no_grad(|| model.forward(&mag, &ph)).unwrap();
    assert!(y.mask.data().iter().all(|&v| v == 1.0));

    let mut model = SeModel::<f64>::new(&tiny(17), 14).unwrap();
    model.force_unit_mask().unwrap();
    let y = no_grad(|| model.forward(&mag, &ph)).unwrap();
    assert!(y.mask.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
}

#[test]
fn mask_and_phase_ranges() {
    let mut m = SeModel::<f64>::new(&tiny(17), 16).unwrap();
    jitter(&mut m.store, 0.3, 17);
    let (mag, ph) = inputs(2, 300, 17, 18);
    let out = no_grad(|| m.forward(&mag, &ph)).unwrap();
    assert!(out.phase.numel() >= 10_000);
    assert!(out.mask.data().iter().all(|&v| v > 0.0 && v < 2.0));
    assert!(out.phase.data().iter().all(|&v| v > -PI && v <= PI));
}

#[test]
fn atan2_conventions() {
    assert_eq!(atan2_principal(0.0, 1.0), 0.0);
    assert_eq!(atan2_principal(1.0, 0.0), PI / 2.0);
    assert_eq!(atan2_principal(0.0, 0.0), 0.0);
    assert_eq!(atan2_principal(-0.0, -0.0), 0.0);
    assert_eq!(atan2_principal(0.0, -1.0), PI);
    assert_eq!(atan2_principal(-0.0, -1.0), PI);
    let y = Tensor::from_vec(vec![0.0, 1.0, 0.0, -0.0], &[4]).unwrap();
    let x = Tensor::from_vec(vec![1.0, 0.0, 0.0, -2.0], &[4]).unwrap();
    assert_eq!(y.atan2(&x).unwrap().to_vec(), vec![0.0, PI / 2.0, 0.0, PI]);
}

#[test]
fn batch_items_are_independent_and_equivariant() {
    let mut m = SeModel::<f64>::new(&tiny(17), 19).unwrap();
    jitter(&mut m.store, 0.1, 20);
    let (mag, ph) = inputs(2, 8, 17, 21);
    let swap = |t: &Tensor<f64>| {
        Tensor::concat(&[t.narrow(0, 1, 1).unwrap(), t.narrow(0, 0, 1).unwrap()], 0).unwrap()
    };
    let a = no_grad(|| m.forward(&mag, &ph)).unwrap();
    let b = no_grad(|| m.forward(&swap(&mag), &swap(&ph))).unwrap();
    assert_eq!(swap(&a.mask).data(), b.mask.data());
    assert_eq!(swap(&a.phase).data(), b.phase.data());

    let dup = |t: &Tensor<f64>| {
        Tensor::concat(&[t.narrow(0, 0, 1).unwrap(), t.narrow(0, 0, 1).unwrap()], 0).unwrap()
    };
    let c = no_grad(|| m.forward(&dup(&mag), &dup(&ph))).unwrap();
    let n = c.mask.numel() / 2;
    assert_eq!(&c.mask.data()[..n], &c.mask.data()[n..]);
    assert_eq!(&c.phase.data()[..n], &c.phase.data()[n..]);
    assert_eq!(&c.mask.data()[..n], &a.mask.data()[..n]);
}

#[test]
fn forward_is_deterministic() {
    let a = SeModel::<f64>::new(&tiny(17), 22).unwrap();
    let b = SeModel::<f64>::new(&tiny(17), 22).unwrap();
    let (mag, ph) = inputs(1, 8, 17, 23);
    let ya = no_grad(|| a.forward(&mag, &ph)).unwrap();
    let yb = no_grad(|| b.forward(&mag, &ph)).unwrap();
    assert_eq!(ya.mask.data(), yb.mask.data());
    assert_eq!(ya.phase.data(), yb.phase.data());
}

fn model_loss(
    m: &SeModel<f64>,
    s: &xlstm_se::nn::ParamStore<f64>,
    mag: &Tensor<f64>,
    ph: &Tensor<f64>,
    w: &Tensor<f64>,
) -> xlstm_se::Result<Tensor<f64>> {
    let mut mm = m.clone();
    mm.store = s.clone();
    let out = mm.forward(mag, ph)?;
    let target = mag.mul(w)?;
    let l_mask = out.mask.mul(mag)?.sub(&target)?.square().mean_all();
    let l_phase = out.phase.sub(ph)?.cos().mean_all();
    l_mask.sub(&l_phase)
}

#[test]
fn end_to_end_gradient_on_one_percent_of_parameters() {
    let mut m = SeModel::<f64>::new(&tiny(17), 24).unwrap();
    jitter(&mut m.store, 0.2, 25);
    let (mag, ph) = inputs(1, 12, 17, 26);
    let w = Tensor::uniform(&[1, 12, 17], 0.5, 1.5, &mut rng(27));
    let count = m.num_params().div_ceil(100);
    let coords = sample_coords(&m.store, count, &mut rng(28));
    let rep = param_grad_check(
        &m.store,
        &coords,
        |s| model_loss(&m, s, &mag, &ph, &w),
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(rep.checked > count / 2, "{rep}");
    assert!(rep.passed(), "{rep}");
}

#[test]
fn end_to_end_gradient_small_input() {
    let mut m = SeModel::<f64>::new(&tiny(9), 29).unwrap();
    jitter(&mut m.store, 0.2, 30);
    let (mag, ph) = inputs(1, 16, 9, 31);
    let w = Tensor::uniform(&[1, 16, 9], 0.5, 1.5, &mut rng(32));
    let coords = sample_coords(&m.store, 120, &mut rng(33));
    let rep = param_grad_check(
        &m.store,
        &coords,
        |s| model_loss(&m, s, &mag, &ph, &w),
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(rep.passed(), "{rep}");
}

#[test]
fn parameter_counts_match_reference_rows() {
    for (name, target, _) in PRESETS {
        let Some(target) = target else { continue };
        let n = count_parameters(&ModelConfig::preset(name).unwrap()).unwrap() as f64 / 1e6;
        assert!(
            (n - target).abs() <= 0.10 * target,
            "{name}: {n:.3} M vs {target} M"
        );
    }
    let c = |p: &str| count_parameters(&ModelConfig::preset(p).unwrap()).unwrap() as f64 / 1e6;
    let (e4, e3, e2) = (c("xlstm-senet"), c("ef3"), c("ef2"));
    assert!(((e4 - e3) - 0.24).abs() <= 0.024, "{}", e4 - e3);
    assert!(((e3 - e2) - 0.25).abs() <= 0.025, "{}", e3 - e2);
    assert!(c("no-bias") < e4);
    assert!(c("unidirectional") < e4);
}

#[test]
fn parameter_count_is_monotone() {
    let base = ModelConfig {
        channels: 16,
        num_tf_blocks: 2,
        expansion: 2,
        ..ModelConfig::default()
    };
    let n = |cfg: ModelConfig| count_parameters(&cfg).unwrap();
    let b = n(base.clone());
    assert!(
        n(ModelConfig {
            channels: 24,
            ..base.clone()
        }) > b
    );
    assert!(
        n(ModelConfig {
            num_tf_blocks: 3,
            ..base.clone()
        }) > b
    );
    assert!(
        n(ModelConfig {
            expansion: 3,
            ..base.clone()
        }) > b
    );
    assert!(
        n(ModelConfig {
            biases: false,
            ..base.clone()
        }) < b
    );
    let mut report = SeModel::<f32>::new(&base, 0).unwrap().report();
    assert_eq!(report.rows.iter().map(|r| r.1).sum::<usize>(), report.total);
    report.rows.retain(|r| r.0.starts_with("tfxlstm"));
    assert_eq!(report.rows.len(), 2);
}

#[test]
fn f32_and_f64_models_agree() {
    let m64 = SeModel::<f64>::new(&tiny(17), 34).unwrap();
    let m32 = SeModel::<f32>::new(&tiny(17), 34).unwrap();
    let (mag, ph) = inputs(1, 10, 17, 35);
    let a = no_grad(|| m64.forward(&mag, &ph)).unwrap();
    let b = no_grad(|| m32.forward(&mag.cast(), &ph.cast())).unwrap();
    let a32: Vec<f32> = a.mask.to_vec().iter().map(|&v| v as f32).collect();
    assert!(max_abs_diff(&a32, b.mask.data()) < 1e-4);
}
