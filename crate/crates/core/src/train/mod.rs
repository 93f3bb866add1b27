//! Losses, toy data, optimizer and the toy training loop.

pub mod data;
pub mod loss;
pub mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::dsp::{
    si_sdr_db, snr_db, unit_power_gain, SpectroPair, StftConfig, Waveform, COMPRESSION,
};
use crate::enhance::{enhance_waveform, synthesize, EnhanceOptions, Spectral};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SeModel};
use crate::tensor::{no_grad, Float, Tensor};

pub use data::{toy_dataset, toy_example, ToyExample, TOY_SNRS_DB};
pub use loss::{loss_suite, LossTerms, LossWeights};
pub use optim::{AdamW, AdamWConfig};

pub const CHECKPOINT_FILE: &str = "toy.ckpt";
pub const CONFIG_FILE: &str = "toy.cfg";
pub const REPORT_FILE: &str = "train.ndjson";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub seed: u64,
    pub batch: usize,
    pub lr: f64,
    /// Training items and their length in seconds.
    pub n_train: usize,
    pub item_s: f64,
    /// Held-out items, drawn from streams after the training ones.
    pub n_eval: usize,
    /// Random crop length per minibatch item.
    pub crop_s: f64,
    pub weights: LossWeights,
    pub stft: StftConfig,
    pub c: f64,
    /// Start from a mask of exactly 1, so the untrained model passes the
    /// noisy magnitude through.
    pub unit_mask_init: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            seed: 0,
            batch: 2,
            lr: 3e-3,
            n_train: 16,
            item_s: 1.0,
            n_eval: 4,
            crop_s: 0.5,
            weights: LossWeights::default(),
            stft: StftConfig::default(),
            c: COMPRESSION,
            unit_mask_init: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.stft.validate()?;
        if self.batch == 0 || self.n_train == 0 || self.n_eval == 0 {
            return Err(Error::Config(
                "batch, n_train and n_eval must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if !(self.crop_s > 0.0 && self.crop_s <= self.item_s) {
            return Err(Error::Config(format!(
                "crop {} s must be in (0, {}]",
                self.crop_s, self.item_s
            )));
        }
        Ok(())
    }

    fn crop_len(&self) -> usize {
        (self.crop_s * f64::from(crate::dsp::SAMPLE_RATE)).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub mag: f64,
    pub complex: f64,
    pub phase: f64,
    pub consistency: f64,
    pub total: f64,
    pub skipped: bool,
}

impl StepRecord {
    fn new(step: usize, t: &LossTerms, skipped: bool) -> Self {
        Self {
            step,
            time: t.time,
            mag: t.mag,
            complex: t.complex,
            phase: t.phase,
            consistency: t.consistency,
            total: t.total,
            skipped,
        }
    }
}

/// Mean SNR and SI-SDR in dB over the held-out items.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalSummary {
    pub items: usize,
    pub snr_noisy_db: f64,
    pub snr_enhanced_db: f64,
    pub snr_improvement_db: f64,
    pub si_sdr_noisy_db: f64,
    pub si_sdr_enhanced_db: f64,
    pub si_sdr_improvement_db: f64,
    /// Enhanced magnitude resynthesized with the noisy phase.
    pub snr_enhanced_noisy_phase_db: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Loss over the whole training set before and after training.
    pub initial: LossTerms,
    pub final_loss: LossTerms,
    pub steps: Vec<StepRecord>,
    pub skipped_steps: u64,
    pub eval: EvalSummary,
    pub checkpoint: PathBuf,
}

impl TrainReport {
    pub fn loss_ratio(&self) -> f64 {
        self.final_loss.total / self.initial.total
    }
}

/// A normalized training or evaluation item.
struct Item {
    clean: Vec<f64>,
    noisy: Vec<f64>,
}

impl Item {
    /// Both signals scaled by the gain that brings the mixture to unit power.
    fn new(ex: &ToyExample) -> Self {
        let g = unit_power_gain(&ex.noisy.samples);
        Self {
            clean: ex.clean.samples.iter().map(|v| v * g).collect(),
            noisy: ex.noisy.samples.iter().map(|v| v * g).collect(),
        }
    }
}

fn spectra<T: Float>(waves: &[&[f64]], cfg: &TrainConfig) -> Result<Spectral<T>> {
    let len = waves[0].len();
    let mut mags = Vec::with_capacity(waves.len());
    let mut phases = Vec::with_capacity(waves.len());
    let mut flat = Vec::with_capacity(waves.len() * len);
    for w in waves {
        let pair = SpectroPair::analyze(
            &Waveform::new(w.to_vec(), crate::dsp::SAMPLE_RATE)?,
            cfg.stft,
            cfg.c,
        )?;
        let (m, p) = pair.tensors::<T>()?;
        mags.push(m);
        phases.push(p);
        flat.extend_from_slice(w);
    }
    Ok(Spectral {
        mag_c: Tensor::concat(&mags, 0)?,
        phase: Tensor::concat(&phases, 0)?,
        wave: Tensor::from_f64_slice(&flat, &[waves.len(), len])?,
    })
}

fn predict<T: Float>(
    model: &SeModel<T>,
    noisy: &Spectral<T>,
    cfg: &TrainConfig,
) -> Result<Spectral<T>> {
    let out = model.forward(&noisy.mag_c, &noisy.phase)?;
    let mag_c = noisy.mag_c.mul(&out.mask)?;
    let wave = synthesize(&mag_c, &out.phase, noisy.wave.dim(1), cfg.stft, cfg.c)?;
    Ok(Spectral {
        mag_c,
        phase: out.phase,
        wave,
    })
}

fn batch_loss<T: Float>(
    model: &SeModel<T>,
    clean: &[&[f64]],
    noisy: &[&[f64]],
    cfg: &TrainConfig,
) -> Result<(Tensor<T>, LossTerms)> {
    let clean = spectra::<T>(clean, cfg)?;
    let noisy = spectra::<T>(noisy, cfg)?;
    let pred = predict(model, &noisy, cfg)?;
    loss_suite(&clean, &pred, &cfg.weights, cfg.stft, cfg.c)
}

/// Loss of each item at full length, averaged over items.
pub fn dataset_loss<T: Float>(
    model: &SeModel<T>,
    items: &[ToyExample],
    cfg: &TrainConfig,
) -> Result<LossTerms> {
    let mut acc = [0.0; 6];
    for ex in items {
        let it = Item::new(ex);
        let (_, t) = no_grad(|| batch_loss(model, &[&it.clean], &[&it.noisy], cfg))?;
        for (a, v) in acc
            .iter_mut()
            .zip(t.as_array().into_iter().chain([t.total]))
        {
            *a += v / items.len() as f64;
        }
    }
    Ok(LossTerms {
        time: acc[0],
        mag: acc[1],
        complex: acc[2],
        phase: acc[3],
        consistency: acc[4],
        total: acc[5],
    })
}

/// Waveform metrics of the enhanced held-out items.
pub fn evaluate<T: Float>(
    model: &SeModel<T>,
    items: &[ToyExample],
    cfg: &TrainConfig,
) -> Result<EvalSummary> {
    let n = items.len() as f64;
    let mut s = EvalSummary {
        items: items.len(),
        snr_noisy_db: 0.0,
        snr_enhanced_db: 0.0,
        snr_improvement_db: 0.0,
        si_sdr_noisy_db: 0.0,
        si_sdr_enhanced_db: 0.0,
        si_sdr_improvement_db: 0.0,
        snr_enhanced_noisy_phase_db: 0.0,
    };
    let opts = EnhanceOptions {
        stft: cfg.stft,
        c: cfg.c,
        noisy_phase: false,
    };
    for ex in items {
        let clean = &ex.clean.samples;
        let est = enhance_waveform(model, &ex.noisy, opts)?;
        let est_np = enhance_waveform(
            model,
            &ex.noisy,
            EnhanceOptions {
                noisy_phase: true,
                ..opts
            },
        )?;
        s.snr_noisy_db += snr_db(clean, &ex.noisy.samples) / n;
        s.snr_enhanced_db += snr_db(clean, &est.samples) / n;
        s.si_sdr_noisy_db += si_sdr_db(clean, &ex.noisy.samples) / n;
        s.si_sdr_enhanced_db += si_sdr_db(clean, &est.samples) / n;
        s.snr_enhanced_noisy_phase_db += snr_db(clean, &est_np.samples) / n;
    }
    s.snr_improvement_db = s.snr_enhanced_db - s.snr_noisy_db;
    s.si_sdr_improvement_db = s.si_sdr_enhanced_db - s.si_sdr_noisy_db;
    Ok(s)
}

fn write_line(out: &mut impl Write, value: &serde_json::Value) -> Result<()> {
    writeln!(out, "{value}")?;
    Ok(())
}

/// Trains `model_cfg` on toy data and writes the checkpoint, the config and
/// an NDJSON report into `out_dir`.
pub fn train_toy<T: Float>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut model = SeModel::<T>::new(model_cfg, cfg.seed)?;
    if cfg.unit_mask_init {
        model.force_unit_mask()?;
    }
    let item_len = (cfg.item_s * f64::from(crate::dsp::SAMPLE_RATE)).round() as usize;
    let train = toy_dataset(cfg.seed, cfg.n_train, cfg.item_s)?;
    let held_out = (0..cfg.n_eval)
        .map(|i| toy_example(cfg.seed, (cfg.n_train + i) as u64, item_len))
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<Item> = train.iter().map(Item::new).collect();

    let mut report = std::io::BufWriter::new(std::fs::File::create(out_dir.join(REPORT_FILE))?);
    let initial = dataset_loss(&model, &train, cfg)?;
    log::info!("initial train loss: {initial}");
    write_line(
        &mut report,
        &serde_json::json!({ "kind": "initial", "loss": terms_json(&initial) }),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let crop = cfg.crop_len().min(item_len);
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    model.store.set_requires_grad(true);
    let mut steps = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut clean = Vec::with_capacity(cfg.batch);
        let mut noisy = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let it = &items[rng.random_range(0..items.len())];
            let off = rng.random_range(0..=item_len - crop);
            clean.push(&it.clean[off..off + crop]);
            noisy.push(&it.noisy[off..off + crop]);
        }
        let (loss, terms) = batch_loss(&model, &clean, &noisy, cfg).map_err(|e| match e {
            Error::Numeric(msg) => {
                Error::Numeric(format!("training diverged at step {step}: {msg}"))
            }
            other => other,
        })?;
        loss.backward()?;
        let applied = opt.step(&mut model.store)?;
        let rec = StepRecord::new(step, &terms, !applied);
        write_line(&mut report, &serde_json::to_value(rec).map_err(json_err)?)?;
        if step % 10 == 0 || step == cfg.steps {
            log::info!("step {step}: {terms}");
        }
        steps.push(rec);
    }
    model.store.set_requires_grad(false);

    let final_loss = if cfg.steps == 0 {
        initial
    } else {
        dataset_loss(&model, &train, cfg)?
    };
    let eval = evaluate(&model, &held_out, cfg)?;
    write_line(
        &mut report,
        &serde_json::json!({
            "kind": "summary",
            "initial": terms_json(&initial),
            "final": terms_json(&final_loss),
            "ratio": final_loss.total / initial.total,
            "skipped_steps": opt.skipped(),
        }),
    )?;
    let mut eval_json = serde_json::to_value(eval).map_err(json_err)?;
    eval_json["kind"] = "eval".into();
    write_line(&mut report, &eval_json)?;
    report.flush()?;

    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    Checkpoint::from_store(&model.store).save(&checkpoint)?;
    std::fs::write(out_dir.join(CONFIG_FILE), model_cfg.to_text())?;
    Ok(TrainReport {
        initial,
        final_loss,
        steps,
        skipped_steps: opt.skipped(),
        eval,
        checkpoint,
    })
}

fn terms_json(t: &LossTerms) -> serde_json::Value {
    serde_json::json!({
        "time": t.time,
        "mag": t.mag,
        "complex": t.complex,
        "phase": t.phase,
        "consistency": t.consistency,
        "total": t.total,
    })
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Loads a model written by [`train_toy`].
pub fn load_trained<T: Float>(dir: &Path) -> Result<SeModel<T>> {
    let cfg = ModelConfig::load(&dir.join(CONFIG_FILE))?;
    let mut model = SeModel::<T>::new(&cfg, 0)?;
    Checkpoint::load(&dir.join(CHECKPOINT_FILE))?.load_into(&mut model.store)?;
    Ok(model)
}
