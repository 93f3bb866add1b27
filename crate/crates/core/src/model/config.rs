use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mlstm::GatingMode;

/// What each direction of a time or frequency path is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlockKind {
    #[default]
    MLstm,
    /// mLSTM block with its mLSTM layer replaced by a grouped LSTM.
    LstmLayerSub,
    /// Whole mLSTM block replaced by a residual LSTM.
    LstmBlockSub,
}

impl BlockKind {
    pub fn name(self) -> &'static str {
        match self {
            BlockKind::MLstm => "mlstm",
            BlockKind::LstmLayerSub => "lstm-layer",
            BlockKind::LstmBlockSub => "lstm-block",
        }
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlstm" => Ok(BlockKind::MLstm),
            "lstm-layer" => Ok(BlockKind::LstmLayerSub),
            "lstm-block" => Ok(BlockKind::LstmBlockSub),
            _ => Err(Error::Config(format!(
                "unknown block kind `{s}` (expected mlstm, lstm-layer or lstm-block)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub num_tf_blocks: usize,
    pub expansion: usize,
    pub bidirectional: bool,
    /// Biases in the layer norms and projections of the sequence blocks.
    pub biases: bool,
    pub gating: GatingMode,
    pub block_kind: BlockKind,
    /// DenseNet depth; layer `i` uses time dilation `2^i`.
    pub dense_depth: usize,
    pub beta: f64,
    pub n_freq: usize,
    /// mLSTM heads; `None` picks 4 for inner width >= 16, else 1.
    pub heads: Option<usize>,
    pub conv_kernel: usize,
    pub lstm_group_width: usize,
    pub instance_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            num_tf_blocks: 4,
            expansion: 4,
            bidirectional: true,
            biases: true,
            gating: GatingMode::Exponential,
            block_kind: BlockKind::MLstm,
            dense_depth: 4,
            beta: 2.0,
            n_freq: 201,
            heads: None,
            conv_kernel: 4,
            lstm_group_width: 8,
            instance_norm: true,
        }
    }
}

/// Preset name, reference parameter count in millions (if any), summary.
pub const PRESETS: &[(&str, Option<f64>, &str)] = &[
    ("xlstm-senet", Some(2.20), "C=64, N=4, E_f=4, bidirectional"),
    ("xlstm-senet2", Some(2.27), "E_f=2, N=8"),
    ("ef3", Some(1.96), "E_f=3"),
    ("ef2", Some(1.71), "E_f=2"),
    ("no-bias", Some(2.18), "no biases in norms and projections"),
    ("unidirectional", Some(2.14), "one direction per path, N=8"),
    (
        "sigmoid-gating",
        Some(2.20),
        "sigmoid input and forget gates",
    ),
    (
        "lstm-layer",
        Some(2.44),
        "mLSTM layer replaced by grouped LSTM",
    ),
    (
        "lstm-block",
        Some(2.34),
        "mLSTM block replaced by LSTM, N=8",
    ),
    ("tiny", None, "C=8, N=1 for desk-scale training"),
];

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        let cfg = match name {
            "xlstm-senet" | "default" => base,
            "xlstm-senet2" => Self {
                expansion: 2,
                num_tf_blocks: 8,
                ..base
            },
            "ef3" => Self {
                expansion: 3,
                ..base
            },
            "ef2" => Self {
                expansion: 2,
                ..base
            },
            "no-bias" => Self {
                biases: false,
                ..base
            },
            "unidirectional" => Self {
                bidirectional: false,
                num_tf_blocks: 8,
                ..base
            },
            "sigmoid-gating" => Self {
                gating: GatingMode::Sigmoid,
                ..base
            },
            "lstm-layer" => Self {
                block_kind: BlockKind::LstmLayerSub,
                ..base
            },
            "lstm-block" => Self {
                block_kind: BlockKind::LstmBlockSub,
                num_tf_blocks: 8,
                ..base
            },
            "tiny" => Self {
                channels: 8,
                num_tf_blocks: 1,
                ..base
            },
            _ => {
                let known: Vec<&str> = PRESETS.iter().map(|p| p.0).collect();
                return Err(Error::Config(format!(
                    "unknown preset `{name}` (known: {})",
                    known.join(", ")
                )));
            }
        };
        Ok(cfg)
    }

    pub fn reference_params_m(name: &str) -> Option<f64> {
        PRESETS.iter().find(|p| p.0 == name).and_then(|p| p.1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("num_tf_blocks", self.num_tf_blocks),
            ("expansion", self.expansion),
            ("dense_depth", self.dense_depth),
            ("n_freq", self.n_freq),
            ("conv_kernel", self.conv_kernel),
            ("lstm_group_width", self.lstm_group_width),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{k}` must be >= 1")));
            }
        }
        if self.n_freq < 3 || self.n_freq.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "`n_freq` must be odd and >= 3 (FFT size a multiple of 4), got {}",
                self.n_freq
            )));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config("`beta` must be a positive number".into()));
        }
        Ok(())
    }

    /// Parses flat `key = value` text. `#` starts a comment. A `preset` key,
    /// if present, must come first and sets the base values.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen_other = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Config(format!("line {}: {msg}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| err(format!("`{key}` expects an integer, got `{v}`")))
            };
            let flag = |v: &str| match v {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(err(format!("`{key}` expects true/false, got `{v}`"))),
            };
            match key {
                "preset" => {
                    if seen_other {
                        return Err(err("`preset` must precede other keys".into()));
                    }
                    cfg = Self::preset(value)?;
                }
                "channels" => cfg.channels = num(value)?,
                "num_tf_blocks" => cfg.num_tf_blocks = num(value)?,
                "expansion" => cfg.expansion = num(value)?,
                "bidirectional" => cfg.bidirectional = flag(value)?,
                "biases" => cfg.biases = flag(value)?,
                "gating" => cfg.gating = value.parse().map_err(|e: Error| err(e.to_string()))?,
                "block_kind" => {
                    cfg.block_kind = value.parse().map_err(|e: Error| err(e.to_string()))?
                }
                "dense_depth" => cfg.dense_depth = num(value)?,
                "beta" => {
                    cfg.beta = value
                        .parse()
                        .map_err(|_| err(format!("`beta` expects a number, got `{value}`")))?
                }
                "n_freq" => cfg.n_freq = num(value)?,
                "heads" => {
                    cfg.heads = if value == "auto" {
                        None
                    } else {
                        Some(num(value)?)
                    }
                }
                "conv_kernel" => cfg.conv_kernel = num(value)?,
                "lstm_group_width" => cfg.lstm_group_width = num(value)?,
                "instance_norm" => cfg.instance_norm = flag(value)?,
                _ => return Err(err(format!("unknown key `{key}`"))),
            }
            seen_other |= key != "preset";
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Serializes to the same format [`ModelConfig::parse`] reads.
    pub fn to_text(&self) -> String {
        let heads = self.heads.map_or("auto".to_string(), |h| h.to_string());
        format!(
            "channels = {}\nnum_tf_blocks = {}\nexpansion = {}\nbidirectional = {}\nbiases = {}\n\
             gating = {}\nblock_kind = {}\ndense_depth = {}\nbeta = {}\nn_freq = {}\nheads = {}\n\
             conv_kernel = {}\nlstm_group_width = {}\ninstance_norm = {}\n",
            self.channels,
            self.num_tf_blocks,
            self.expansion,
            self.bidirectional,
            self.biases,
            self.gating,
            self.block_kind.name(),
            self.dense_depth,
            self.beta,
            self.n_freq,
            heads,
            self.conv_kernel,
            self.lstm_group_width,
            self.instance_norm
        )
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "C={} N={} E_f={} {} biases={} gating={} block={}",
            self.channels,
            self.num_tf_blocks,
            self.expansion,
            if self.bidirectional {
                "bidirectional"
            } else {
                "unidirectional"
            },
            self.biases,
            self.gating,
            self.block_kind.name()
        )
    }
}
