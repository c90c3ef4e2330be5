//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Params`] store owns the trainable [`Tensor`]s of a model. Each forward
//! pass builds a [`Tape`] of operations over immutable parameter views;
//! [`Tape::backward`] walks the tape in reverse and returns per-parameter
//! gradients, which the caller accumulates into the store before an
//! [`adam::AdamState::step`]. Precision is selectable: `f64` for gradient
//! checks, `f32` for training (checkpoints are always 32-bit on disk).

mod adam;
mod checkpoint;
pub mod gradcheck;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_into, save, ManifestEntry};
pub use tape::{NodeId, ParamGrads, Tape};

use num_traits::Float;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;
use std::fmt;

/// Floating-point element type usable on a tape (`f32` or `f64`).
pub trait Scalar:
    Float + fmt::Debug + fmt::Display + Default + Send + Sync + std::iter::Sum + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense n-dimensional value buffer, optionally carrying a gradient of the
/// same shape.
#[derive(Debug, Clone)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    values: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "tensor: shape {:?} does not match buffer length {}",
            shape,
            values.len()
        );
        Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![T::zero(); n])
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![T::zero(); self.values.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Handle to a tensor inside a [`Params`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named store of trainable parameters. Immutable during a forward pass;
/// gradient application and optimizer steps are single-writer.
#[derive(Debug, Clone, Default)]
pub struct Params<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Params {
            names: Vec::new(),
            tensors: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name:?}"
        );
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.clone(), id.0);
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Accumulate tape gradients into the stored `grad` buffers.
    pub fn accumulate(&mut self, grads: &ParamGrads<T>) {
        for (i, g) in grads.iter().enumerate() {
            if let Some(buf) = self.tensors[i].grad_mut() {
                for (dst, src) in buf.iter_mut().zip(g) {
                    *dst = *dst + *src;
                }
            }
        }
    }

    /// Global L2 norm of all stored gradients.
    pub fn grad_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for t in &self.tensors {
            if let Some(g) = t.grad() {
                for &x in g {
                    let v = x.as_f64();
                    acc += v * v;
                }
            }
        }
        acc.sqrt()
    }

    /// Scale all gradients so the global norm does not exceed `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = T::from_f64(max_norm / norm);
            for t in &mut self.tensors {
                if let Some(g) = t.grad_mut() {
                    for x in g.iter_mut() {
                        *x = *x * scale;
                    }
                }
            }
        }
    }

    /// Copy of all parameter values, for best-checkpoint snapshots.
    pub fn snapshot(&self) -> Vec<Vec<T>> {
        self.tensors.iter().map(|t| t.values().to_vec()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<T>]) {
        assert_eq!(snapshot.len(), self.tensors.len(), "snapshot size mismatch");
        for (t, s) in self.tensors.iter_mut().zip(snapshot) {
            t.values_mut().copy_from_slice(s);
        }
    }
}

/// Parameter initialization. Matrices use uniform(-a, a) with
/// a = sqrt(6 / (fan_in + fan_out)), biases are zeros, embedding tables are
/// N(0, 0.1). All draws come from the seeded generator in f64 before
/// narrowing, so f32 and f64 models see the same initial point.
pub mod init {
    use super::*;

    pub fn xavier<T: Scalar>(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Tensor<T> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let values = (0..rows * cols)
            .map(|_| T::from_f64(rng.random_range(-a..a)))
            .collect();
        Tensor::new(vec![rows, cols], values)
    }

    pub fn zeros_vec<T: Scalar>(n: usize) -> Tensor<T> {
        Tensor::zeros(vec![n])
    }

    pub fn ones_vec<T: Scalar>(n: usize) -> Tensor<T> {
        Tensor::new(vec![n], vec![T::one(); n])
    }

    pub fn embedding<T: Scalar>(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Tensor<T> {
        let normal = Normal::new(0.0f64, 0.1).expect("valid normal");
        let values = (0..rows * cols)
            .map(|_| T::from_f64(normal.sample(rng)))
            .collect();
        Tensor::new(vec![rows, cols], values)
    }
}
