//! Synthetic noisy/clean pairs: harmonic notes in lowpass noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const TOY_SNRS_DB: [f64; 4] = [0.0, 5.0, 10.0, 15.0];
/// Highest harmonic frequency in the clean signal.
pub const MAX_HARMONIC_HZ: f64 = 3800.0;
pub const PEAK: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyExample {
    pub clean: Waveform,
    pub noisy: Waveform,
    pub snr_db: f64,
}

impl ToyExample {
    pub fn noise(&self) -> Vec<f64> {
        self.noisy
            .samples
            .iter()
            .zip(&self.clean.samples)
            .map(|(y, x)| y - x)
            .collect()
    }
}

/// Attack, decay, sustain, release envelope over `n` samples.
fn adsr(i: usize, n: usize, attack: usize, decay: usize, sustain: f64, release: usize) -> f64 {
    let smooth = |x: f64| 0.5 - 0.5 * (std::f64::consts::PI * x.clamp(0.0, 1.0)).cos();
    let tail = n.saturating_sub(release);
    if i < attack {
        smooth(i as f64 / attack as f64)
    } else if i < attack + decay {
        1.0 - (1.0 - sustain) * smooth((i - attack) as f64 / decay as f64)
    } else if i < tail {
        sustain
    } else {
        sustain * (1.0 - smooth((i - tail) as f64 / release as f64))
    }
}

fn clean_signal(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let sr = f64::from(SAMPLE_RATE);
    let mut out = vec![0.0; len];
    let mut start = (rng.random_range(0.0..0.15) * sr) as usize;
    while start < len {
        let dur = ((rng.random_range(0.15..0.5) * sr) as usize).min(len - start);
        let f0: f64 = rng.random_range(100.0..400.0);
        let max_k = (MAX_HARMONIC_HZ / f0).floor() as usize;
        let count = rng.random_range(2..=4).min(max_k);
        let mut ks: Vec<usize> = (1..=max_k).collect();
        for j in 0..count {
            let pick = rng.random_range(j..ks.len());
            ks.swap(j, pick);
        }
        let partials: Vec<(f64, f64, f64)> = ks[..count]
            .iter()
            .map(|&k| {
                (
                    k as f64 * f0,
                    rng.random_range(0.2..1.0) / k as f64,
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        let attack = (rng.random_range(0.02..0.06) * sr) as usize;
        let decay = (rng.random_range(0.03..0.08) * sr) as usize;
        let release = (rng.random_range(0.03..0.08) * sr) as usize;
        let sustain = rng.random_range(0.5..0.9);
        for i in 0..dur {
            let env = adsr(i, dur, attack, decay, sustain, release);
            let t = i as f64 / sr;
            let s: f64 = partials
                .iter()
                .map(|(f, a, p)| a * (std::f64::consts::TAU * f * t + p).sin())
                .sum();
            out[start + i] += env * s;
        }
        start += dur + (rng.random_range(0.05..0.25) * sr) as usize;
    }
    out
}

/// White noise through `y[n] = a y[n-1] + (1 - a) x[n]`.
fn lowpass_noise(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let a: f64 = rng.random_range(0.0..0.9);
    let mut y = 0.0;
    (0..len)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            y = a * y + (1.0 - a) * x;
            y
        })
        .collect()
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// One item from its own random stream, so items are independent of `n_items`.
pub fn toy_example(seed: u64, index: u64, len: usize) -> Result<ToyExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let clean = clean_signal(&mut rng, len);
    let noise = lowpass_noise(&mut rng, len);
    let snr_db = TOY_SNRS_DB[rng.random_range(0..TOY_SNRS_DB.len())];
    let (ec, en) = (energy(&clean), energy(&noise));
    if ec == 0.0 || en == 0.0 {
        return Err(Error::Numeric(format!(
            "toy item {index}: silent component"
        )));
    }
    let g = (ec / (en * 10f64.powf(snr_db / 10.0))).sqrt();
    let noisy: Vec<f64> = clean.iter().zip(&noise).map(|(c, n)| c + g * n).collect();
    let peak = noisy
        .iter()
        .chain(&clean)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let s = PEAK / peak;
    Ok(ToyExample {
        clean: Waveform::new(clean.iter().map(|v| v * s).collect(), SAMPLE_RATE)?,
        noisy: Waveform::new(noisy.iter().map(|v| v * s).collect(), SAMPLE_RATE)?,
        snr_db,
    })
}

/// `n_items` examples of `len_s` seconds each, identical for identical seeds.
pub fn toy_dataset(seed: u64, n_items: usize, len_s: f64) -> Result<Vec<ToyExample>> {
    if n_items == 0 {
        return Err(Error::Contract(
            "toy_dataset needs at least one item".into(),
        ));
    }
    let len = (len_s * f64::from(SAMPLE_RATE)).round() as usize;
    if len == 0 {
        return Err(Error::Contract(format!(
            "toy_dataset length {len_s} s is empty"
        )));
    }
    (0..n_items as u64)
        .into_par_iter()
        .map(|i| toy_example(seed, i, len))
        .collect()
}
