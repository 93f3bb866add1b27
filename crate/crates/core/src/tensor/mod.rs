//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted buffer. Operations on
//! tensors that require gradients record a backward closure together with
//! their inputs; [`Tensor::backward`] walks the resulting DAG in reverse
//! topological order and accumulates gradients into the leaves.
//!
//! Layout is always contiguous; reshapes and permutations copy.

mod broadcast;
pub mod conv;
pub mod gradcheck;
mod linalg;
pub mod norm;
mod ops;
mod shape_ops;

use std::cell::Cell;
use std::collections::HashSet;
use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub use broadcast::broadcast_shape;
pub use conv::{Conv1dGeom, Conv2dGeom};
pub use gradcheck::{finite_diff_check, GradReport};
pub use ops::{anti_wrap, atan2_principal};
pub(crate) use ops::{log_sigmoid, sigmoid};

/// Element type tag, stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => f.write_str("f32"),
            DType::F64 => f.write_str("f64"),
        }
    }
}

/// Scalar types a tensor can hold.
pub trait Float:
    num_traits::Float
    + num_traits::FloatConst
    + rustfft::FftNum
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + fmt::Display
{
    const DTYPE: DType;

    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Float for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Float for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn of_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Shorthand for converting an `f64` literal into `T`.
#[inline]
pub fn cst<T: Float>(v: f64) -> T {
    T::of_f64(v)
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any backward information.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _restore = Restore(prev);
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct GradFn<T: Float> {
    name: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Float> {
    id: usize,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    grad_fn: Option<GradFn<T>>,
}

#[derive(Clone)]
pub struct Tensor<T: Float>(Arc<Node<T>>);

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape)
            .field("dtype", &T::DTYPE)
            .field("requires_grad", &self.0.requires_grad);
        if let Some(g) = &self.0.grad_fn {
            s.field("op", &g.name);
        }
        if self.numel() <= 16 {
            s.field("data", &self.0.data);
        }
        s.finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Float> Tensor<T> {
    fn from_node(
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        grad_fn: Option<GradFn<T>>,
    ) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            grad_fn,
        }))
    }

    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidShape(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        if numel_of(shape) != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Self::from_node(shape.to_vec(), data, false, None))
    }

    pub fn from_f64_slice(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&v| T::of_f64(v)).collect(), shape)
    }

    pub fn scalar(v: T) -> Self {
        Self::from_node(vec![1], vec![v], false, None)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::from_node(shape.to_vec(), vec![v; numel_of(shape)], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel_of(shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of_f64(z * std)
            })
            .collect();
        Self::from_node(shape.to_vec(), data, false, None)
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel_of(shape))
            .map(|_| T::of_f64(rng.random_range(lo..hi)))
            .collect();
        Self::from_node(shape.to_vec(), data, false, None)
    }

    /// Same data, marked (or unmarked) as a gradient-tracking leaf.
    pub fn requires_grad(self, flag: bool) -> Self {
        if self.0.requires_grad == flag && self.0.grad_fn.is_none() {
            return self;
        }
        Self::from_node(self.0.shape.clone(), self.0.data.clone(), flag, None)
    }

    /// A leaf copy that is cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::from_node(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// Records an operation result. `backward` maps the upstream gradient to
    /// one optional gradient per input; it is dropped when no input tracks
    /// gradients or grad mode is off.
    pub fn from_op(
        name: &'static str,
        data: Vec<T>,
        shape: Vec<usize>,
        inputs: Vec<Tensor<T>>,
        backward: impl Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    ) -> Self {
        let track = grad_enabled() && inputs.iter().any(|t| t.0.requires_grad);
        if track {
            let grad_fn = GradFn {
                name,
                inputs,
                backward: Box::new(backward),
            };
            Self::from_node(shape, data, true, Some(grad_fn))
        } else {
            Self::from_node(shape, data, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn item(&self) -> T {
        self.0.data[0]
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn tracks_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.name)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().unwrap() = None;
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor::from_node(
            self.0.shape.clone(),
            self.0.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
            false,
            None,
        )
    }

    /// Back-propagates from a scalar loss into every reachable leaf that
    /// requires gradients. Gradients accumulate across calls.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        Graph::from_root(self).backward(vec![T::one()]);
        Ok(())
    }
}

/// Topologically ordered view of the nodes reachable from a root that
/// participate in gradient flow.
pub struct Graph<T: Float> {
    order: Vec<Tensor<T>>,
}

impl<T: Float> Graph<T> {
    pub fn from_root(root: &Tensor<T>) -> Self {
        let mut order = Vec::new();
        if !root.0.requires_grad {
            return Graph { order };
        }
        let mut visited = HashSet::new();
        // iterative post-order DFS; recurrent graphs get deep
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(root.clone(), 0)];
        visited.insert(root.id());
        while let Some((node, child)) = stack.pop() {
            let inputs = node
                .0
                .grad_fn
                .as_ref()
                .map(|g| &g.inputs[..])
                .unwrap_or(&[]);
            if child < inputs.len() {
                let next = inputs[child].clone();
                stack.push((node, child + 1));
                if next.0.requires_grad && visited.insert(next.id()) {
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }
        Graph { order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Op names in topological order (leaves report `"leaf"`).
    pub fn op_names(&self) -> Vec<&'static str> {
        self.order
            .iter()
            .map(|t| t.op_name().unwrap_or("leaf"))
            .collect()
    }

    fn backward(self, seed: Vec<T>) {
        let mut pending: std::collections::HashMap<usize, Vec<T>> =
            std::collections::HashMap::new();
        let Some(root) = self.order.last() else {
            return;
        };
        pending.insert(root.id(), seed);
        for node in self.order.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.grad_fn {
                None => {
                    let mut slot = node.0.grad.lock().unwrap();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => *slot = Some(g),
                    }
                }
                Some(f) => {
                    let grads = (f.backward)(&g);
                    debug_assert_eq!(grads.len(), f.inputs.len(), "op {}", f.name);
                    for (input, grad) in f.inputs.iter().zip(grads) {
                        let Some(grad) = grad else { continue };
                        if !input.0.requires_grad {
                            continue;
                        }
                        debug_assert_eq!(grad.len(), input.numel(), "op {}", f.name);
                        match pending.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += *b),
                            None => {
                                pending.insert(input.id(), grad);
                            }
                        }
                    }
                }
            }
        }
    }
}
