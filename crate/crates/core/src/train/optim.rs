//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moments are kept in f64 whatever the parameter precision.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    skipped: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
            skipped: 0,
        }
    }

    /// Updates taken so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Steps refused because a gradient was not finite.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    /// One update on raw buffers. Returns `false`, leaving everything
    /// untouched, when any gradient is not finite.
    pub fn step_slices(&mut self, params: &mut [Vec<f64>], grads: &[Vec<f64>]) -> Result<bool> {
        if params.len() != grads.len() {
            return Err(Error::shape("adamw", &[params.len()], &[grads.len()]));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(Error::shape("adamw", &[p.len()], &[g.len()]));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            self.skipped += 1;
            log::warn!(
                "adamw: non-finite gradient, step skipped ({} so far)",
                self.skipped
            );
            return Ok(false);
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * (mh / (vh.sqrt() + eps) + weight_decay * p[j]);
            }
        }
        Ok(true)
    }

    /// Applies accumulated gradients to every parameter of the store.
    /// Parameters without a gradient are treated as having zero gradient.
    pub fn step<T: Float>(&mut self, store: &mut ParamStore<T>) -> Result<bool> {
        let ids: Vec<_> = store.ids().collect();
        let mut params: Vec<Vec<f64>> = ids.iter().map(|&id| store.get(id).to_f64_vec()).collect();
        let grads: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| {
                let t = store.get(id);
                t.grad().map_or_else(
                    || vec![0.0; t.numel()],
                    |g| g.iter().map(|v| v.as_f64()).collect(),
                )
            })
            .collect();
        if !self.step_slices(&mut params, &grads)? {
            return Ok(false);
        }
        for (&id, p) in ids.iter().zip(&params) {
            let shape = store.get(id).shape().to_vec();
            let flag = store.get(id).tracks_grad();
            store.set(id, Tensor::from_f64_slice(p, &shape)?.requires_grad(flag))?;
        }
        Ok(true)
    }
}
