//! Residual mLSTM block and the bidirectional wrapper.

use rand::Rng;

use super::{GatingMode, GroupedLstm, LstmBlock, MLstmLayer, MLstmLayerConfig};
use crate::error::{Error, Result};
use crate::nn::{fan_in_uniform, small_init, ParamId, ParamStore};
use crate::tensor::norm::layer_norm;
use crate::tensor::{Conv1dGeom, Float, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// What sits between the causal convolution and the output gating.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerKind {
    MLstm,
    /// Grouped conventional LSTM with the given group width.
    Lstm {
        group_width: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MLstmBlockConfig {
    pub dim: usize,
    pub expansion: usize,
    pub heads: Option<usize>,
    pub bias: bool,
    pub mode: GatingMode,
    pub conv_kernel: usize,
    pub inner: InnerKind,
}

impl MLstmBlockConfig {
    pub fn new(dim: usize, expansion: usize) -> Self {
        Self {
            dim,
            expansion,
            heads: None,
            bias: true,
            mode: GatingMode::Exponential,
            conv_kernel: 4,
            inner: InnerKind::MLstm,
        }
    }

    pub fn inner_dim(&self) -> usize {
        self.dim * self.expansion
    }

    pub fn layer_config(&self) -> MLstmLayerConfig {
        let base = MLstmLayerConfig::new(self.inner_dim(), self.mode);
        let mut cfg = match self.heads {
            Some(h) => base.with_heads(h),
            None => base,
        };
        cfg.bias = self.bias;
        cfg
    }
}

#[derive(Debug, Clone)]
pub enum Inner {
    MLstm(MLstmLayer),
    Lstm(GroupedLstm),
}

/// `y = x + Down(Inner(SiLU(CausalConv(Up_1(LN(x))))) * SiLU(Up_2(LN(x))))`.
#[derive(Debug, Clone)]
pub struct MLstmBlock {
    pub cfg: MLstmBlockConfig,
    pub norm_w: ParamId,
    pub norm_b: Option<ParamId>,
    pub up_w: ParamId,
    pub up_b: Option<ParamId>,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub inner: Inner,
    pub down_w: ParamId,
    pub down_b: Option<ParamId>,
}

fn opt_bias<T: Float>(
    store: &mut ParamStore<T>,
    on: bool,
    name: String,
    n: usize,
) -> Result<Option<ParamId>> {
    on.then(|| store.add(name, Tensor::zeros(&[n]))).transpose()
}

impl MLstmBlock {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: MLstmBlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (dm, d, k) = (cfg.dim, cfg.inner_dim(), cfg.conv_kernel);
        if dm == 0 || cfg.expansion == 0 || k == 0 {
            return Err(Error::Config(
                "block width, expansion and conv kernel must be >= 1".into(),
            ));
        }
        let norm_w = store.add(format!("{prefix}.norm.weight"), Tensor::ones(&[dm]))?;
        let norm_b = opt_bias(store, cfg.bias, format!("{prefix}.norm.bias"), dm)?;
        let up_w = store.add(
            format!("{prefix}.up.weight"),
            small_init(&[dm, 2 * d], dm, rng),
        )?;
        let up_b = opt_bias(store, cfg.bias, format!("{prefix}.up.bias"), 2 * d)?;
        let conv_w = store.add(
            format!("{prefix}.conv.weight"),
            fan_in_uniform(&[d, 1, k], k, rng),
        )?;
        let conv_b = store.add(format!("{prefix}.conv.bias"), fan_in_uniform(&[d], k, rng))?;
        let inner = match cfg.inner {
            InnerKind::MLstm => Inner::MLstm(MLstmLayer::new(
                store,
                &format!("{prefix}.cell"),
                cfg.layer_config(),
                rng,
            )?),
            InnerKind::Lstm { group_width } => {
                if group_width == 0 || d % group_width != 0 {
                    return Err(Error::Config(format!(
                        "LSTM group width {group_width} does not divide {d}"
                    )));
                }
                Inner::Lstm(GroupedLstm::new(
                    store,
                    &format!("{prefix}.cell"),
                    d / group_width,
                    group_width,
                    rng,
                )?)
            }
        };
        let down_w = store.add(
            format!("{prefix}.down.weight"),
            small_init(&[d, dm], d, rng),
        )?;
        let down_b = opt_bias(store, cfg.bias, format!("{prefix}.down.bias"), dm)?;
        Ok(Self {
            cfg,
            norm_w,
            norm_b,
            up_w,
            up_b,
            conv_w,
            conv_b,
            inner,
            down_w,
            down_b,
        })
    }

    /// `x: [b, t, dim]` to `[b, t, dim]`.
    pub fn forward<T: Float>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (dm, d) = (self.cfg.dim, self.cfg.inner_dim());
        if x.rank() != 3 || x.dim(2) != dm {
            return Err(Error::shape("mlstm_block", x.shape(), &[dm]));
        }
        let t = x.dim(1);
        let get = |id: Option<ParamId>| id.map(|i| store.get(i));
        let h = layer_norm(x, store.get(self.norm_w), get(self.norm_b), LN_EPS)?;
        let up = h.linear(store.get(self.up_w), get(self.up_b))?;
        let main = up.narrow(2, 0, d)?;
        let gate = up.narrow(2, d, d)?;
        let k = self.cfg.conv_kernel;
        let geom = Conv1dGeom {
            padding: k - 1,
            groups: d,
            ..Default::default()
        };
        // symmetric padding k-1, keep the first t outputs: output t sees inputs t-k+1..=t
        let conv = main
            .transpose(1, 2)?
            .conv1d(store.get(self.conv_w), Some(store.get(self.conv_b)), geom)?
            .narrow(2, 0, t)?
            .silu()
            .transpose(1, 2)?;
        let cell = match &self.inner {
            Inner::MLstm(l) => l.forward(store, &conv)?,
            Inner::Lstm(l) => l.forward(store, &conv)?,
        };
        let y = cell
            .mul(&gate.silu())?
            .linear(store.get(self.down_w), get(self.down_b))?;
        x.add(&y)
    }

    /// Parameters whose zeroing turns the block into the identity.
    pub fn identity_params(&self) -> Vec<ParamId> {
        std::iter::once(self.down_w).chain(self.down_b).collect()
    }
}

/// A residual sequence block: mLSTM based or a plain LSTM substitute.
#[derive(Debug, Clone)]
pub enum SeqBlock {
    MLstm(MLstmBlock),
    Lstm(LstmBlock),
}

impl SeqBlock {
    pub fn forward<T: Float>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            SeqBlock::MLstm(b) => b.forward(store, x),
            SeqBlock::Lstm(b) => b.forward(store, x),
        }
    }

    /// Parameters whose zeroing turns the block into the identity.
    pub fn identity_params(&self) -> Vec<ParamId> {
        match self {
            SeqBlock::MLstm(b) => b.identity_params(),
            SeqBlock::Lstm(b) => vec![b.lstm.wx, b.lstm.wh, b.lstm.bias],
        }
    }
}

/// `merge(concat(fwd(x), flip(bwd(flip(x)))))` with a kernel-1 transposed
/// convolution from `2*dim` to `dim` channels as the merge.
#[derive(Debug, Clone)]
pub struct BiMLstm {
    pub fwd: SeqBlock,
    pub bwd: SeqBlock,
    /// `[2*dim, dim, 1]`, the transposed-convolution weight layout.
    pub merge_w: ParamId,
    pub merge_b: Option<ParamId>,
    pub dim: usize,
}

impl BiMLstm {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        fwd: SeqBlock,
        bwd: SeqBlock,
        dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let merge_w = store.add(
            format!("{prefix}.merge.weight"),
            fan_in_uniform(&[2 * dim, dim, 1], 2 * dim, rng),
        )?;
        let merge_b = bias
            .then(|| {
                store.add(
                    format!("{prefix}.merge.bias"),
                    fan_in_uniform(&[dim], 2 * dim, rng),
                )
            })
            .transpose()?;
        Ok(Self {
            fwd,
            bwd,
            merge_w,
            merge_b,
            dim,
        })
    }

    /// The two direction outputs before merging, each `[b, t, dim]`.
    pub fn branches<T: Float>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let a = self.fwd.forward(store, x)?;
        let b = self.bwd.forward(store, &x.flip(1)?)?.flip(1)?;
        Ok((a, b))
    }

    pub fn forward<T: Float>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = self.branches(store, x)?;
        let w = store.get(self.merge_w).reshape(&[2 * self.dim, self.dim])?;
        Tensor::concat(&[a, b], 2)?.linear(&w, self.merge_b.map(|i| store.get(i)))
    }
}
