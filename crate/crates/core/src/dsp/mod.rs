//! Waveform and spectrogram conversions, power-law compression, mask
//! application and WAV I/O.

pub mod stft;
pub mod wav;

pub use stft::{hann_periodic, istft_t, reflect_index, stft_t, Stft, WINDOW_EPS};
pub use wav::{wav_read, wav_write, WavFormat};

use crate::error::{Error, Result};
use crate::tensor::{atan2_principal, Float, Tensor};

pub const SAMPLE_RATE: u32 = 16_000;
pub const COMPRESSION: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            n_fft: 400,
            hop: 100,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_fft < 2 || !self.n_fft.is_multiple_of(2) || self.hop == 0 || self.hop > self.n_fft
        {
            return Err(Error::Config(format!(
                "STFT needs an even n_fft >= 2 and 1 <= hop <= n_fft, got {}/{}",
                self.n_fft, self.hop
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// `1 + ceil(len / hop)`.
    pub fn frames(&self, len: usize) -> usize {
        1 + len.div_ceil(self.hop)
    }
}

/// Mono audio at a fixed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::UnsupportedAudio(format!(
                "sample rate {sample_rate} Hz is not supported; resample to {SAMPLE_RATE} Hz first"
            )));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric(
                "waveform contains non-finite samples".into(),
            ));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}

/// Complex spectrogram, `[frames, bins]` row-major real and imaginary parts.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub frames: usize,
    pub bins: usize,
}

impl Spectrum {
    pub fn magnitude(&self) -> Vec<f64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r.hypot(*i))
            .collect()
    }

    /// Wrapped phase in `(-pi, pi]`, zero where the bin is exactly zero.
    pub fn phase(&self) -> Vec<f64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(&r, &i)| atan2_principal(i, r))
            .collect()
    }

    pub fn from_polar(mag: &[f64], phase: &[f64], frames: usize, bins: usize) -> Result<Self> {
        if mag.len() != phase.len() || mag.len() != frames * bins {
            return Err(Error::shape(
                "from_polar",
                &[mag.len()],
                &[phase.len(), frames * bins],
            ));
        }
        Ok(Self {
            re: mag.iter().zip(phase).map(|(m, p)| m * p.cos()).collect(),
            im: mag.iter().zip(phase).map(|(m, p)| m * p.sin()).collect(),
            frames,
            bins,
        })
    }
}

pub fn stft(w: &Waveform, cfg: StftConfig) -> Result<Spectrum> {
    let st = Stft::<f64>::new(cfg)?;
    let (re, im) = st.forward(&w.samples)?;
    Ok(Spectrum {
        re,
        im,
        frames: st.frames(w.len()),
        bins: st.bins(),
    })
}

pub fn istft(spec: &Spectrum, len: usize, cfg: StftConfig) -> Result<Waveform> {
    let st = Stft::<f64>::new(cfg)?;
    if spec.bins != st.bins() {
        return Err(Error::Geometry(format!(
            "spectrum has {} bins, geometry expects {}",
            spec.bins,
            st.bins()
        )));
    }
    Waveform::new(st.inverse(&spec.re, &spec.im, len)?, SAMPLE_RATE)
}

fn check_non_negative(x: &[f64], what: &str) -> Result<()> {
    match x.iter().position(|v| !(*v >= 0.0)) {
        Some(i) => Err(Error::Contract(format!(
            "{what} expects non-negative input, got {} at {i}",
            x[i]
        ))),
        None => Ok(()),
    }
}

/// `x^c` elementwise.
pub fn compress(mag: &[f64], c: f64) -> Result<Vec<f64>> {
    check_non_negative(mag, "compress")?;
    Ok(mag.iter().map(|m| m.powf(c)).collect())
}

/// `x^(1/c)` elementwise, the inverse of [`compress`].
pub fn decompress(mag_c: &[f64], c: f64) -> Result<Vec<f64>> {
    check_non_negative(mag_c, "decompress")?;
    Ok(mag_c.iter().map(|m| m.powf(1.0 / c)).collect())
}

/// `(Y_c * M)^(1/c)`: enhanced magnitude from the compressed noisy magnitude
/// and a compressed-domain mask.
pub fn apply_mask(mag_c: &[f64], mask: &[f64], c: f64) -> Result<Vec<f64>> {
    if mag_c.len() != mask.len() {
        return Err(Error::shape("apply_mask", &[mag_c.len()], &[mask.len()]));
    }
    check_non_negative(mask, "apply_mask")?;
    let prod: Vec<f64> = mag_c.iter().zip(mask).map(|(y, m)| y * m).collect();
    decompress(&prod, c)
}

/// Differentiable [`apply_mask`].
pub fn apply_mask_t<T: Float>(mag_c: &Tensor<T>, mask: &Tensor<T>, c: f64) -> Result<Tensor<T>> {
    if mag_c.shape() != mask.shape() {
        return Err(Error::shape("apply_mask", mag_c.shape(), mask.shape()));
    }
    mag_c.mul(mask)?.powf(1.0 / c)
}

/// Compressed magnitude and wrapped phase, `[frames, bins]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectroPair {
    pub mag_c: Vec<f64>,
    pub phase: Vec<f64>,
    pub frames: usize,
    pub bins: usize,
    pub c: f64,
}

impl SpectroPair {
    pub fn from_spectrum(spec: &Spectrum, c: f64) -> Result<Self> {
        Ok(Self {
            mag_c: compress(&spec.magnitude(), c)?,
            phase: spec.phase(),
            frames: spec.frames,
            bins: spec.bins,
            c,
        })
    }

    pub fn analyze(w: &Waveform, cfg: StftConfig, c: f64) -> Result<Self> {
        Self::from_spectrum(&stft(w, cfg)?, c)
    }

    pub fn to_spectrum(&self) -> Result<Spectrum> {
        Spectrum::from_polar(
            &decompress(&self.mag_c, self.c)?,
            &self.phase,
            self.frames,
            self.bins,
        )
    }

    /// `[1, frames, bins]` tensors of the compressed magnitude and phase.
    pub fn tensors<T: Float>(&self) -> Result<(Tensor<T>, Tensor<T>)> {
        let shape = [1, self.frames, self.bins];
        Ok((
            Tensor::from_f64_slice(&self.mag_c, &shape)?,
            Tensor::from_f64_slice(&self.phase, &shape)?,
        ))
    }
}

/// `sqrt(len / energy)`, the gain that brings a signal to unit mean power.
/// Silent signals get gain 1.
pub fn unit_power_gain(samples: &[f64]) -> f64 {
    let e: f64 = samples.iter().map(|s| s * s).sum();
    if e > 0.0 {
        (samples.len() as f64 / e).sqrt()
    } else {
        1.0
    }
}

/// `10 log10(|clean|^2 / |clean - est|^2)`.
pub fn snr_db(clean: &[f64], est: &[f64]) -> f64 {
    let s: f64 = clean.iter().map(|x| x * x).sum();
    let n: f64 = clean.iter().zip(est).map(|(a, b)| (a - b) * (a - b)).sum();
    10.0 * (s / n.max(f64::MIN_POSITIVE)).log10()
}

/// Scale-invariant SDR in dB.
pub fn si_sdr_db(clean: &[f64], est: &[f64]) -> f64 {
    let dot: f64 = clean.iter().zip(est).map(|(a, b)| a * b).sum();
    let e: f64 = clean.iter().map(|x| x * x).sum();
    let alpha = if e > 0.0 { dot / e } else { 0.0 };
    let target: Vec<f64> = clean.iter().map(|x| alpha * x).collect();
    snr_db(&target, est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (0..len)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                0.3 * v
            })
            .collect::<Vec<f64>>();
        Waveform::new(s, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn geometry() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.bins(), 201);
        assert_eq!(cfg.frames(32000), 321);
        assert_eq!(cfg.frames(1), 2);
        assert!(StftConfig {
            n_fft: 401,
            hop: 100
        }
        .validate()
        .is_err());
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        let s = (0..16000)
            .map(|n| (std::f64::consts::TAU * 1000.0 * n as f64 / 16000.0).sin())
            .collect();
        let spec = stft(
            &Waveform::new(s, SAMPLE_RATE).unwrap(),
            StftConfig::default(),
        )
        .unwrap();
        let mag = spec.magnitude();
        let row = &mag[50 * 201..51 * 201];
        let k = (0..201).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(k, 25);
    }

    #[test]
    fn round_trip_and_linearity() {
        let cfg = StftConfig::default();
        for (len, seed) in [(16000, 0), (401, 1), (1, 2), (7, 3)] {
            let w = noise(len, seed);
            let spec = stft(&w, cfg).unwrap();
            let back = istft(&spec, len, cfg).unwrap();
            let err = w
                .samples
                .iter()
                .zip(&back.samples)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-12, "len {len}: {err}");
        }
        let w = noise(3000, 4);
        let spec = stft(&w, cfg).unwrap();
        let doubled = Spectrum {
            re: spec.re.iter().map(|v| 2.0 * v).collect(),
            im: spec.im.iter().map(|v| 2.0 * v).collect(),
            ..spec.clone()
        };
        let a = istft(&spec, 3000, cfg).unwrap();
        let b = istft(&doubled, 3000, cfg).unwrap();
        assert!(a
            .samples
            .iter()
            .zip(&b.samples)
            .all(|(x, y)| (2.0 * x - y).abs() < 1e-12));
    }

    #[test]
    fn zero_in_zero_out() {
        let cfg = StftConfig::default();
        let w = Waveform::new(vec![0.0; 1000], SAMPLE_RATE).unwrap();
        let spec = stft(&w, cfg).unwrap();
        assert!(spec.magnitude().iter().all(|&m| m == 0.0));
        assert!(spec.phase().iter().all(|&p| p == 0.0));
        assert!(istft(&spec, 1000, cfg)
            .unwrap()
            .samples
            .iter()
            .all(|&s| s == 0.0));
        assert!(stft(&Waveform::new(vec![], SAMPLE_RATE).unwrap(), cfg).is_err());
    }

    #[test]
    fn compression_contract() {
        assert_eq!(compress(&[1.0, 0.0], 0.3).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(compress(&[-1.0], 0.3), Err(Error::Contract(_))));
        assert!(decompress(&[f64::NAN], 0.3).is_err());
        let x = [0.5, 3.0, 1e-4, 20.0];
        let back = decompress(&compress(&x, 0.3).unwrap(), 0.3).unwrap();
        assert!(x
            .iter()
            .zip(&back)
            .all(|(a, b)| ((a - b) / a).abs() < 1e-12));
    }

    #[test]
    fn mask_identity_and_annihilation() {
        let y = [0.0, 0.2, 1.0, 2.5];
        let yc = compress(&y, 0.3).unwrap();
        let unit = apply_mask(&yc, &[1.0; 4], 0.3).unwrap();
        assert!(y
            .iter()
            .zip(&unit)
            .all(|(a, b)| (a - b).abs() <= 1e-15 * a.max(1.0)));
        assert_eq!(apply_mask(&yc, &[0.0; 4], 0.3).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn rejects_other_rates() {
        assert!(matches!(
            Waveform::new(vec![0.0], 8000),
            Err(Error::UnsupportedAudio(_))
        ));
    }

    #[test]
    fn snr_of_scaled_error() {
        let c = [1.0, -1.0, 1.0, -1.0];
        let e = [1.1, -1.1, 1.1, -1.1];
        assert!((snr_db(&c, &e) - 20.0).abs() < 1e-9);
        assert!(si_sdr_db(&c, &e) > 200.0);
    }
}
