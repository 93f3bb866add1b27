//! Dual-path block: a sequence model along time, then one along frequency.

use rand::Rng;

use super::config::{BlockKind, ModelConfig};
use crate::error::{Error, Result};
use crate::mlstm::block::InnerKind;
use crate::mlstm::{BiMLstm, LstmBlock, MLstmBlock, MLstmBlockConfig, SeqBlock};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone)]
pub enum PathBlock {
    /// `x + BiMLstm(x)`.
    Bi(BiMLstm),
    /// A single residual block, `block(x)`.
    Uni(SeqBlock),
}

impl PathBlock {
    pub fn forward<T: Float>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            PathBlock::Bi(b) => x.add(&b.forward(store, x)?),
            PathBlock::Uni(b) => b.forward(store, x),
        }
    }

    /// Zeroing all of these makes the path the identity: each block's own
    /// identity set plus the merge projection.
    pub fn identity_params(&self) -> Vec<ParamId> {
        match self {
            PathBlock::Bi(b) => {
                let mut v = b.fwd.identity_params();
                v.extend(b.bwd.identity_params());
                v.push(b.merge_w);
                v.extend(b.merge_b);
                v
            }
            PathBlock::Uni(b) => b.identity_params(),
        }
    }
}

fn seq_block<T: Float, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<SeqBlock> {
    let mut bc = MLstmBlockConfig::new(cfg.channels, cfg.expansion);
    bc.heads = cfg.heads;
    bc.bias = cfg.biases;
    bc.mode = cfg.gating;
    bc.conv_kernel = cfg.conv_kernel;
    Ok(match cfg.block_kind {
        BlockKind::MLstm => SeqBlock::MLstm(MLstmBlock::new(store, prefix, bc, rng)?),
        BlockKind::LstmLayerSub => {
            bc.inner = InnerKind::Lstm {
                group_width: cfg.lstm_group_width,
            };
            SeqBlock::MLstm(MLstmBlock::new(store, prefix, bc, rng)?)
        }
        BlockKind::LstmBlockSub => {
            SeqBlock::Lstm(LstmBlock::new(store, prefix, cfg.channels, rng)?)
        }
    })
}

fn path<T: Float, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<PathBlock> {
    let fwd = seq_block(store, &format!("{prefix}.fwd"), cfg, rng)?;
    if !cfg.bidirectional {
        return Ok(PathBlock::Uni(fwd));
    }
    let bwd = seq_block(store, &format!("{prefix}.bwd"), cfg, rng)?;
    Ok(PathBlock::Bi(BiMLstm::new(
        store,
        prefix,
        fwd,
        bwd,
        cfg.channels,
        cfg.biases,
        rng,
    )?))
}

#[derive(Debug, Clone)]
pub struct TfXlstmBlock {
    pub time: PathBlock,
    pub freq: PathBlock,
}

impl TfXlstmBlock {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        index: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            time: path(store, &format!("tfxlstm.{index}.time"), cfg, rng)?,
            freq: path(store, &format!("tfxlstm.{index}.freq"), cfg, rng)?,
        })
    }

    /// `[B, C, T, F']` to `[B, C, T, F']`.
    pub fn forward<T: Float>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 4 {
            return Err(Error::shape("tf_xlstm_block", x.shape(), &[]));
        }
        let (b, c, t, f) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let xt = x.permute(&[0, 3, 2, 1])?.reshape(&[b * f, t, c])?;
        let yt = self.time.forward(store, &xt)?;
        let xf = yt
            .reshape(&[b, f, t, c])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * t, f, c])?;
        let yf = self.freq.forward(store, &xf)?;
        yf.reshape(&[b, t, f, c])?.permute(&[0, 3, 1, 2])
    }

    pub fn identity_params(&self) -> Vec<ParamId> {
        let mut v = self.time.identity_params();
        v.extend(self.freq.identity_params());
        v
    }
}
