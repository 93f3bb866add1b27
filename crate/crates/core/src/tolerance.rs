//! Every numeric threshold used by the verification commands, in one place.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub name: &'static str,
    pub value: f64,
    pub meaning: &'static str,
}

/// Recurrent vs parallel mLSTM, max abs diff in f64.
pub const EQUIV_F64: f64 = 1e-9;
/// Recurrent vs parallel mLSTM, max abs diff in f32.
pub const EQUIV_F32: f64 = 1e-4;
/// Finite-difference relative error bound.
pub const GRAD_REL: f64 = 1e-4;
/// Central-difference step.
pub const GRAD_STEP: f64 = 1e-5;
/// Fraction of model parameters sampled by the end-to-end gradient check.
pub const GRAD_PARAM_FRACTION: f64 = 0.01;
/// STFT then iSTFT, max abs error in f64.
pub const STFT_ROUND_TRIP: f64 = 1e-6;
/// Mask rule against the direct formula, relative error.
pub const MASK_EXACT: f64 = 1e-12;
/// Relative distance to a reference parameter count.
pub const PARAM_COUNT_REL: f64 = 0.10;
pub const SLOPE_RECURRENT_MIN: f64 = 0.8;
pub const SLOPE_RECURRENT_MAX: f64 = 1.3;
pub const SLOPE_ATTENTION_MIN: f64 = 1.7;
pub const SLOPE_SEPARATION_MIN: f64 = 0.4;
/// Final over initial training loss after the toy run.
pub const TRAIN_LOSS_RATIO_MAX: f64 = 0.5;
/// Required held-out SNR gain of the toy model, dB.
pub const TRAIN_SNR_GAIN_MIN_DB: f64 = 0.0;
/// Identity-checkpoint enhancement, max abs sample error (f32 model path).
pub const IDENTITY_ENHANCE: f64 = 1e-4;

pub const REGISTRY: [Tolerance; 16] = [
    Tolerance {
        name: "equiv_f64",
        value: EQUIV_F64,
        meaning: "recurrent vs parallel mLSTM, max abs diff (f64)",
    },
    Tolerance {
        name: "equiv_f32",
        value: EQUIV_F32,
        meaning: "recurrent vs parallel mLSTM, max abs diff (f32)",
    },
    Tolerance {
        name: "grad_rel",
        value: GRAD_REL,
        meaning: "finite-difference relative error (f64)",
    },
    Tolerance {
        name: "grad_step",
        value: GRAD_STEP,
        meaning: "central-difference step",
    },
    Tolerance {
        name: "grad_param_fraction",
        value: GRAD_PARAM_FRACTION,
        meaning: "share of model parameters checked end to end",
    },
    Tolerance {
        name: "stft_round_trip",
        value: STFT_ROUND_TRIP,
        meaning: "STFT/iSTFT max abs error (f64)",
    },
    Tolerance {
        name: "mask_exact",
        value: MASK_EXACT,
        meaning: "mask rule vs direct formula, relative",
    },
    Tolerance {
        name: "param_count_rel",
        value: PARAM_COUNT_REL,
        meaning: "parameter count vs reference, relative",
    },
    Tolerance {
        name: "slope_recurrent_min",
        value: SLOPE_RECURRENT_MIN,
        meaning: "recurrent mLSTM log-log slope, lower bound",
    },
    Tolerance {
        name: "slope_recurrent_max",
        value: SLOPE_RECURRENT_MAX,
        meaning: "recurrent mLSTM log-log slope, upper bound",
    },
    Tolerance {
        name: "slope_attention_min",
        value: SLOPE_ATTENTION_MIN,
        meaning: "naive attention log-log slope, lower bound",
    },
    Tolerance {
        name: "slope_separation_min",
        value: SLOPE_SEPARATION_MIN,
        meaning: "attention minus recurrent slope",
    },
    Tolerance {
        name: "train_loss_ratio_max",
        value: TRAIN_LOSS_RATIO_MAX,
        meaning: "toy training final/initial loss",
    },
    Tolerance {
        name: "train_snr_gain_min_db",
        value: TRAIN_SNR_GAIN_MIN_DB,
        meaning: "toy held-out SNR gain over noisy input (dB)",
    },
    Tolerance {
        name: "identity_enhance",
        value: IDENTITY_ENHANCE,
        meaning: "identity checkpoint, max abs sample error",
    },
    Tolerance {
        name: "grad_floor",
        value: crate::tensor::gradcheck::GRAD_FLOOR,
        meaning: "gradients below this are not scored",
    },
];

pub fn get(name: &str) -> Option<f64> {
    REGISTRY.iter().find(|t| t.name == name).map(|t| t.value)
}

/// The registry as an aligned table.
pub struct Registry;

impl fmt::Display for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "tolerances:")?;
        for t in REGISTRY {
            writeln!(
                f,
                "  {:<22} {:<9} {}",
                t.name,
                format!("{:e}", t.value),
                t.meaning
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_found() {
        for (i, t) in REGISTRY.iter().enumerate() {
            assert!(
                REGISTRY[i + 1..].iter().all(|u| u.name != t.name),
                "{}",
                t.name
            );
            assert_eq!(get(t.name), Some(t.value));
        }
        assert!(Registry.to_string().contains("equiv_f32"));
    }
}
