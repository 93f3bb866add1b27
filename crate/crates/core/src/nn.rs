//! Named parameter storage and initializers.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::gradcheck::{finite_diff_check_coords, GradReport};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the owning store.
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, insertion-ordered collection of named leaf tensors.
///
/// Modules keep [`ParamId`]s and read their tensors from the store at
/// forward time, so an optimizer can swap in updated values without
/// touching the module structure.
#[derive(Clone, Default)]
pub struct ParamStore<T: Float> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value.detach());
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    /// Replaces a value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let old = &self.values[id.0];
        if old.shape() != value.shape() {
            return Err(Error::shape("ParamStore::set", old.shape(), value.shape()));
        }
        let flag = old.tracks_grad();
        self.values[id.0] = value.detach().requires_grad(flag);
        Ok(())
    }

    pub fn set_by_name(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        self.set(id, value)
    }

    /// Turns every parameter into a fresh gradient-tracking leaf (or not).
    pub fn set_requires_grad(&mut self, flag: bool) {
        for v in &mut self.values {
            *v = v.detach().requires_grad(flag);
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.values
    }

    /// Numel summed per name prefix (everything before the `depth`-th dot).
    pub fn breakdown(&self, depth: usize) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (name, t) in self.iter() {
            let key: String = name.split('.').take(depth).collect::<Vec<_>>().join(".");
            match out.last_mut() {
                Some((k, n)) if *k == key => *n += t.numel(),
                _ => match out.iter_mut().find(|(k, _)| *k == key) {
                    Some((_, n)) => *n += t.numel(),
                    None => out.push((key, t.numel())),
                },
            }
        }
        out
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }
}

/// `count` distinct `(parameter, element)` coordinates drawn uniformly over
/// all scalars of the store.
pub fn sample_coords<T: Float, R: Rng + ?Sized>(
    store: &ParamStore<T>,
    count: usize,
    rng: &mut R,
) -> Vec<(ParamId, usize)> {
    let total = store.numel();
    let picks = rand::seq::index::sample(rng, total, count.min(total)).into_vec();
    let mut offsets = Vec::with_capacity(store.len());
    let mut acc = 0;
    for t in store.tensors() {
        offsets.push(acc);
        acc += t.numel();
    }
    let mut out: Vec<(ParamId, usize)> = picks
        .into_iter()
        .map(|flat| {
            let p = offsets.partition_point(|&o| o <= flat) - 1;
            (ParamId(p), flat - offsets[p])
        })
        .collect();
    out.sort_by_key(|&(p, e)| (p.0, e));
    out
}

/// Central-difference check of `loss(store)` against autodiff at the given
/// coordinates.
pub fn param_grad_check<F>(
    store: &ParamStore<f64>,
    coords: &[(ParamId, usize)],
    loss: F,
    h: f64,
    tol: f64,
) -> Result<GradReport>
where
    F: Fn(&ParamStore<f64>) -> Result<Tensor<f64>>,
{
    let flat: Vec<(usize, usize)> = coords.iter().map(|&(p, e)| (p.0, e)).collect();
    finite_diff_check_coords(
        store.tensors(),
        &flat,
        |leaves| {
            let mut s = store.clone();
            s.values = leaves.to_vec();
            loss(&s)
        },
        h,
        tol,
    )
}

/// Normal init with variance `2 / (5 * fan_in)` for projection weights.
pub fn small_init<T: Float, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / (5.0 * fan_in as f64)).sqrt(), rng)
}

/// Uniform in `±1/sqrt(fan_in)`, the usual default for convolution weights and biases.
pub fn fan_in_uniform<T: Float, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> Tensor<T> {
    let b = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -b, b, rng)
}
