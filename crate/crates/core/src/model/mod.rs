//! The speech-enhancement network: encoder, stacked dual-path blocks, a
//! magnitude-mask decoder and a phase decoder.

pub mod config;
pub mod conv;
pub mod tf_block;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{BlockKind, ModelConfig, PRESETS};
pub use conv::{
    halved_freq, learnable_sigmoid, DenseBlock, FeatureEncoder, MaskDecoder, PhaseDecoder,
};
pub use tf_block::{PathBlock, TfXlstmBlock};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone)]
pub struct DecoderOutputs<T: Float> {
    /// Compressed-magnitude mask in `(0, beta)`, `[B, T, F]`.
    pub mask: Tensor<T>,
    /// Wrapped phase in `(-pi, pi]`, `[B, T, F]`.
    pub phase: Tensor<T>,
}

#[derive(Clone)]
pub struct SeModel<T: Float> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: FeatureEncoder,
    pub blocks: Vec<TfXlstmBlock>,
    pub mask: MaskDecoder,
    pub phase: PhaseDecoder,
}

impl<T: Float> SeModel<T> {
    /// Builds and initializes the model; the same seed gives the same weights.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (c, depth, norm) = (cfg.channels, cfg.dense_depth, cfg.instance_norm);
        let encoder = FeatureEncoder::new(&mut store, c, depth, norm, &mut rng)?;
        let blocks = (0..cfg.num_tf_blocks)
            .map(|i| TfXlstmBlock::new(&mut store, i, cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mask = MaskDecoder::new(&mut store, c, depth, cfg.n_freq, cfg.beta, norm, &mut rng)?;
        let phase = PhaseDecoder::new(&mut store, c, depth, cfg.n_freq, norm, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            blocks,
            mask,
            phase,
        })
    }

    fn check_inputs(&self, mag_c: &Tensor<T>, phase: &Tensor<T>) -> Result<()> {
        if mag_c.rank() != 3 || mag_c.shape() != phase.shape() {
            return Err(Error::shape("model input", mag_c.shape(), phase.shape()));
        }
        if mag_c.dim(2) != self.cfg.n_freq {
            return Err(Error::Geometry(format!(
                "model is configured for {} frequency bins, input has {}",
                self.cfg.n_freq,
                mag_c.dim(2)
            )));
        }
        Ok(())
    }

    /// Encoder followed by the dual-path stack: `[B, C, T, F']`.
    pub fn features(&self, mag_c: &Tensor<T>, phase: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_inputs(mag_c, phase)?;
        let x = Tensor::concat(&[mag_c.unsqueeze(1)?, phase.unsqueeze(1)?], 1)?;
        let mut h = self.encoder.forward(&self.store, &x)?;
        for b in &self.blocks {
            h = b.forward(&self.store, &h)?;
        }
        Ok(h)
    }

    /// Compressed magnitude `[B, T, F]` and wrapped phase `[B, T, F]` in,
    /// mask and phase estimates out.
    pub fn forward(&self, mag_c: &Tensor<T>, phase: &Tensor<T>) -> Result<DecoderOutputs<T>> {
        let h = self.features(mag_c, phase)?;
        Ok(DecoderOutputs {
            mask: self.mask.forward(&self.store, &h)?,
            phase: self.phase.forward(&self.store, &h)?,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.numel()
    }

    pub fn report(&self) -> ParamReport {
        let mut rows: Vec<(String, usize)> = Vec::new();
        for (name, t) in self.store.iter() {
            let parts: Vec<&str> = name.split('.').collect();
            let key = if parts[0] == "tfxlstm" {
                parts[..2].join(".")
            } else {
                parts[0].to_string()
            };
            match rows.iter_mut().find(|(k, _)| *k == key) {
                Some((_, n)) => *n += t.numel(),
                None => rows.push((key, t.numel())),
            }
        }
        ParamReport {
            total: self.num_params(),
            rows,
        }
    }

    pub fn zero_params(&mut self, ids: &[ParamId]) -> Result<()> {
        for &id in ids {
            let z = Tensor::zeros(self.store.get(id).shape());
            self.store.set(id, z)?;
        }
        Ok(())
    }

    /// Parameters whose zeroing makes the whole dual-path stack the identity.
    pub fn stack_identity_params(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(TfXlstmBlock::identity_params)
            .collect()
    }

    /// Forces the mask decoder to output exactly 1 everywhere (debugging aid
    /// for the enhancement path). Needs `beta > 1`.
    pub fn force_unit_mask(&mut self) -> Result<()> {
        let beta = self.cfg.beta;
        if beta <= 1.0 {
            return Err(Error::Config(format!(
                "a unit mask needs beta > 1, got {beta}"
            )));
        }
        // beta * sigmoid(alpha * b) = 1 with alpha = 1
        let b = -(beta - 1.0).ln();
        let out = self.mask.out.clone();
        self.zero_params(&[out.weight])?;
        self.store.set(out.bias, Tensor::full(&[1], T::of_f64(b)))?;
        self.store
            .set(self.mask.alpha, Tensor::ones(&[self.cfg.n_freq]))?;
        Ok(())
    }
}

/// Exact parameter count of a configuration.
pub fn count_parameters(cfg: &ModelConfig) -> Result<usize> {
    Ok(SeModel::<f32>::new(cfg, 0)?.num_params())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub total: usize,
    pub rows: Vec<(String, usize)>,
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, n) in &self.rows {
            writeln!(f, "  {k:<16} {n:>10}")?;
        }
        write!(
            f,
            "  {:<16} {:>10}  ({:.3} M)",
            "total",
            self.total,
            self.total as f64 / 1e6
        )
    }
}
