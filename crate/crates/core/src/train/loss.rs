//! Training objectives on compressed spectra and waveforms.
//!
//! The loss names come with no formulas, so the forms here are chosen:
//! L1 on samples, MSE on compressed magnitude and on compressed real and
//! imaginary parts, anti-wrapped phase distances (instantaneous phase, group
//! delay along frequency and instantaneous frequency along time) and an STFT
//! consistency term. The adversarial metric-discriminator loss is not
//! implemented; its weight is fixed at 0.

use std::fmt;

use crate::dsp::{stft_t, StftConfig};
use crate::enhance::Spectral;
use crate::error::{Error, Result};
use crate::tensor::{cst, Float, Tensor};

/// Floor added to `|Z|^2` before the fractional power in the consistency term.
pub const CONSISTENCY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub time: f64,
    pub mag: f64,
    pub complex: f64,
    pub phase: f64,
    pub consistency: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            time: 0.2,
            mag: 0.9,
            complex: 0.1,
            phase: 0.3,
            consistency: 0.1,
        }
    }
}

impl LossWeights {
    /// Weight of the metric discriminator term, always 0.
    pub const METRIC_GAN: f64 = 0.0;

    pub fn validate(&self) -> Result<()> {
        let w = self.as_array();
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got {w:?}"
            )));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(Error::Config(
                "at least one loss weight must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 5] {
        [
            self.time,
            self.mag,
            self.complex,
            self.phase,
            self.consistency,
        ]
    }
}

/// Unweighted value of each term.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub time: f64,
    pub mag: f64,
    pub complex: f64,
    pub phase: f64,
    pub consistency: f64,
    pub total: f64,
}

impl LossTerms {
    pub const NAMES: [&'static str; 5] = ["time", "mag", "complex", "phase", "consistency"];

    pub fn as_array(&self) -> [f64; 5] {
        [
            self.time,
            self.mag,
            self.complex,
            self.phase,
            self.consistency,
        ]
    }
}

impl fmt::Display for LossTerms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total {:.5} (time {:.5}, mag {:.5}, complex {:.5}, phase {:.5}, consistency {:.5})",
            self.total, self.time, self.mag, self.complex, self.phase, self.consistency
        )
    }
}

/// Mean of `anti_wrap(a - b)` over every element.
fn phase_distance<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(a.sub(b)?.anti_wrap().mean_all())
}

fn diff<T: Float>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let n = x.dim(axis);
    x.narrow(axis, 1, n - 1)?.sub(&x.narrow(axis, 0, n - 1)?)
}

/// Instantaneous phase, group delay and instantaneous frequency distances,
/// summed. Inputs are `[B, T, F]`.
pub fn phase_loss<T: Float>(clean: &Tensor<T>, pred: &Tensor<T>) -> Result<Tensor<T>> {
    let mut total = phase_distance(pred, clean)?;
    if clean.dim(2) > 1 {
        total = total.add(&phase_distance(&diff(pred, 2)?, &diff(clean, 2)?)?)?;
    }
    if clean.dim(1) > 1 {
        total = total.add(&phase_distance(&diff(pred, 1)?, &diff(clean, 1)?)?)?;
    }
    Ok(total)
}

/// `Z (|Z|^2 + eps)^((c - 1) / 2)` for a `[.., 2]` complex tensor: the
/// magnitude is compressed and the angle kept.
pub fn compress_complex<T: Float>(z: &Tensor<T>, c: f64) -> Result<Tensor<T>> {
    let last = z.rank() - 1;
    let power = z
        .square()
        .sum_axes(&[last], true)?
        .add_scalar(cst(CONSISTENCY_EPS));
    z.mul(&power.powf((c - 1.0) / 2.0)?)
}

/// Distance between the predicted spectrum and the spectrum of its own
/// resynthesis, compared after magnitude compression.
pub fn consistency_loss<T: Float>(
    pred: &Spectral<T>,
    cfg: StftConfig,
    c: f64,
) -> Result<Tensor<T>> {
    let x_hat = crate::enhance::to_complex(&pred.mag_c, &pred.phase, c)?;
    let restft = stft_t(&pred.wave, cfg)?;
    let d = compress_complex(&restft, c)?.sub(&compress_complex(&x_hat, c)?)?;
    Ok(d.square().mean_all())
}

fn check(clean: &Spectral<impl Float>, pred: &Spectral<impl Float>) -> Result<()> {
    for (name, a, b) in [
        (
            "loss_suite magnitude",
            clean.mag_c.shape(),
            pred.mag_c.shape(),
        ),
        ("loss_suite phase", clean.phase.shape(), pred.phase.shape()),
        ("loss_suite waveform", clean.wave.shape(), pred.wave.shape()),
    ] {
        if a != b {
            return Err(Error::shape(name, a, b));
        }
    }
    if clean.mag_c.shape() != clean.phase.shape() || clean.mag_c.rank() != 3 {
        return Err(Error::shape(
            "loss_suite spectra",
            clean.mag_c.shape(),
            clean.phase.shape(),
        ));
    }
    Ok(())
}

/// Weighted training loss and its unweighted terms. Terms with zero weight
/// are still reported but kept out of the graph.
pub fn loss_suite<T: Float>(
    clean: &Spectral<T>,
    pred: &Spectral<T>,
    w: &LossWeights,
    cfg: StftConfig,
    c: f64,
) -> Result<(Tensor<T>, LossTerms)> {
    check(clean, pred)?;
    w.validate()?;
    let time = pred.wave.sub(&clean.wave)?.abs().mean_all();
    let mag = pred.mag_c.sub(&clean.mag_c)?.square().mean_all();
    let re = pred
        .mag_c
        .mul(&pred.phase.cos())?
        .sub(&clean.mag_c.mul(&clean.phase.cos())?)?;
    let im = pred
        .mag_c
        .mul(&pred.phase.sin())?
        .sub(&clean.mag_c.mul(&clean.phase.sin())?)?;
    let complex = re
        .square()
        .mean_all()
        .add(&im.square().mean_all())?
        .mul_scalar(cst(0.5));
    let phase = phase_loss(&clean.phase, &pred.phase)?;
    let consistency = consistency_loss(pred, cfg, c)?;

    let parts = [time, mag, complex, phase, consistency];
    let vals: Vec<f64> = parts.iter().map(|t| t.item().as_f64()).collect();
    let mut total: Option<Tensor<T>> = None;
    for (p, wi) in parts.iter().zip(w.as_array()) {
        if wi == 0.0 {
            continue;
        }
        let term = p.mul_scalar(cst(wi));
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    let total = total.expect("validated weights have a positive entry");
    let terms = LossTerms {
        time: vals[0],
        mag: vals[1],
        complex: vals[2],
        phase: vals[3],
        consistency: vals[4],
        total: total.item().as_f64(),
    };
    if !terms.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss: {terms}")));
    }
    Ok((total, terms))
}
