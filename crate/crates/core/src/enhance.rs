//! Noisy waveform to enhanced waveform through the network.

use crate::dsp::{istft_t, unit_power_gain, SpectroPair, StftConfig, Waveform};
use crate::error::Result;
use crate::model::SeModel;
use crate::tensor::{no_grad, Float, Tensor};

/// Compressed magnitude, phase and waveform of a batch, `[B, T, F]`,
/// `[B, T, F]` and `[B, L]`.
#[derive(Debug, Clone)]
pub struct Spectral<T: Float> {
    pub mag_c: Tensor<T>,
    pub phase: Tensor<T>,
    pub wave: Tensor<T>,
}

/// Polar compressed spectrum to a `[B, T, F, 2]` linear complex spectrum.
pub fn to_complex<T: Float>(mag_c: &Tensor<T>, phase: &Tensor<T>, c: f64) -> Result<Tensor<T>> {
    let mag = mag_c.powf(1.0 / c)?;
    let re = mag.mul(&phase.cos())?.unsqueeze(3)?;
    let im = mag.mul(&phase.sin())?.unsqueeze(3)?;
    Tensor::concat(&[re, im], 3)
}

/// Waveforms of length `len` from compressed magnitude and phase.
pub fn synthesize<T: Float>(
    mag_c: &Tensor<T>,
    phase: &Tensor<T>,
    len: usize,
    cfg: StftConfig,
    c: f64,
) -> Result<Tensor<T>> {
    istft_t(&to_complex(mag_c, phase, c)?, len, cfg)
}

/// Runs the model on a noisy compressed spectrum and returns the enhanced
/// spectrum and waveform. The magnitude follows the mask rule
/// `(Y^c * M)^(1/c)`, kept here in the compressed domain as `Y^c * M`.
pub fn enhance_spectral<T: Float>(
    model: &SeModel<T>,
    mag_c: &Tensor<T>,
    phase: &Tensor<T>,
    len: usize,
    cfg: StftConfig,
    c: f64,
) -> Result<Spectral<T>> {
    let out = model.forward(mag_c, phase)?;
    let est_c = mag_c.mul(&out.mask)?;
    let wave = istft_t(&to_complex(&est_c, &out.phase, c)?, len, cfg)?;
    Ok(Spectral {
        mag_c: est_c,
        phase: out.phase,
        wave,
    })
}

/// Options for [`enhance_waveform`].
#[derive(Debug, Clone, Copy)]
pub struct EnhanceOptions {
    pub stft: StftConfig,
    pub c: f64,
    /// Keep the noisy phase instead of the predicted one.
    pub noisy_phase: bool,
}

impl Default for EnhanceOptions {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            c: crate::dsp::COMPRESSION,
            noisy_phase: false,
        }
    }
}

/// Enhances one waveform. The input is scaled to unit mean power before
/// analysis and the output is scaled back.
pub fn enhance_waveform<T: Float>(
    model: &SeModel<T>,
    noisy: &Waveform,
    opts: EnhanceOptions,
) -> Result<Waveform> {
    let gain = unit_power_gain(&noisy.samples);
    let scaled = Waveform::new(
        noisy.samples.iter().map(|s| s * gain).collect(),
        noisy.sample_rate,
    )?;
    let pair = SpectroPair::analyze(&scaled, opts.stft, opts.c)?;
    let (mag_c, phase) = pair.tensors::<T>()?;
    let wave = no_grad(|| -> Result<Tensor<T>> {
        let out = model.forward(&mag_c, &phase)?;
        let est_c = mag_c.mul(&out.mask)?;
        let ph = if opts.noisy_phase {
            phase.clone()
        } else {
            out.phase
        };
        synthesize(&est_c, &ph, noisy.len(), opts.stft, opts.c)
    })?;
    let samples = wave.data().iter().map(|&v| v.as_f64() / gain).collect();
    Waveform::new(samples, noisy.sample_rate)
}
