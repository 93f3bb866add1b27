//! Matrix-memory LSTM: cell, layer, block and bidirectional wrapper, plus a
//! conventional LSTM for comparison.

pub mod block;
pub mod cell;
pub mod layer;
pub mod lstm;
pub mod parallel;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{log_sigmoid, Float, Tensor};

pub use block::{BiMLstm, Inner, InnerKind, MLstmBlock, MLstmBlockConfig, SeqBlock};
pub use cell::{
    mlstm_recurrent, mlstm_step, naive_recurrence, recurrent_sequence, MLstmState, StepInput,
};
pub use layer::{MLstmLayer, MLstmLayerConfig, Streams};
pub use lstm::{lstm_sequence_raw, GroupedLstm, LstmBlock};
pub use parallel::{mlstm_parallel, parallel_raw};

/// Activation used for the input and forget gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum GatingMode {
    /// `i = exp(.)`, `f = exp(.)`.
    #[default]
    Exponential,
    /// `i = sigmoid(.)`, `f = sigmoid(.)`.
    Sigmoid,
    /// `i = exp(.)`, `f = sigmoid(.)`.
    ExpInputSigmoidForget,
}

impl GatingMode {
    pub const ALL: [GatingMode; 3] = [
        GatingMode::Exponential,
        GatingMode::Sigmoid,
        GatingMode::ExpInputSigmoidForget,
    ];

    #[inline]
    pub fn log_input<T: Float>(self, pre: T) -> T {
        match self {
            GatingMode::Sigmoid => log_sigmoid(pre),
            _ => pre,
        }
    }

    #[inline]
    pub fn log_forget<T: Float>(self, pre: T) -> T {
        match self {
            GatingMode::Exponential => pre,
            _ => log_sigmoid(pre),
        }
    }

    pub fn log_input_t<T: Float>(self, pre: &Tensor<T>) -> Tensor<T> {
        match self {
            GatingMode::Sigmoid => pre.log_sigmoid(),
            _ => pre.clone(),
        }
    }

    pub fn log_forget_t<T: Float>(self, pre: &Tensor<T>) -> Tensor<T> {
        match self {
            GatingMode::Exponential => pre.clone(),
            _ => pre.log_sigmoid(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GatingMode::Exponential => "exponential",
            GatingMode::Sigmoid => "sigmoid",
            GatingMode::ExpInputSigmoidForget => "exp-input-sigmoid-forget",
        }
    }
}

impl fmt::Display for GatingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GatingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exponential" | "exp" => Ok(GatingMode::Exponential),
            "sigmoid" => Ok(GatingMode::Sigmoid),
            "exp-input-sigmoid-forget" | "mixed" => Ok(GatingMode::ExpInputSigmoidForget),
            _ => Err(Error::Config(format!(
                "unknown gating mode `{s}` (expected exponential, sigmoid or exp-input-sigmoid-forget)"
            ))),
        }
    }
}

/// Heads used for inner width `d` when none is configured.
pub fn default_heads(d: usize) -> usize {
    if d >= 16 {
        4
    } else {
        1
    }
}
