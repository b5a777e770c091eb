//! Minimal differentiable-computation substrate.
//!
//! Dense row-major tensors, a computation tape recording forward
//! operations, reverse-mode gradient computation and an SGD optimizer.
//! Training runs at `f32`; [`gradcheck`] re-instantiates everything at
//! `f64` so finite differences have enough headroom to certify every
//! derivative below 1e-4 relative error.

pub mod gradcheck;
mod kernels;
pub mod sgd;
pub mod tape;

pub use gradcheck::grad_check;
pub use sgd::{LrSchedule, SgdConfig, SgdState};
pub use tape::{NodeId, Tape};

use num_traits::Float;

use crate::error::{Error, Result};

/// Element type of the substrate: `f32` for training, `f64` for
/// finite-difference verification.
pub trait Scalar:
    Float + std::fmt::Debug + std::fmt::Display + std::iter::Sum + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> f32 {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> f64 {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense n-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); numel] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: (0..numel).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Convert element type, preserving shape.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
        }
    }
}

/// A model parameter: value plus gradient accumulator of the same shape.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Named, ordered parameter storage. Order is fixed at construction time,
/// which keeps optimizer traversal, checkpoints and gradient application
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T> {
    entries: Vec<(String, Param<T>)>,
}

/// Stable handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef(pub usize);

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamRef {
        self.entries.push((name.into(), Param::new(value)));
        ParamRef(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, r: ParamRef) -> &Param<T> {
        &self.entries[r.0].1
    }

    pub fn get_mut(&mut self, r: ParamRef) -> &mut Param<T> {
        &mut self.entries[r.0].1
    }

    pub fn name(&self, r: ParamRef) -> &str {
        &self.entries[r.0].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamRef, &str, &Param<T>)> {
        self.entries.iter().enumerate().map(|(i, (n, p))| (ParamRef(i), n.as_str(), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamRef, &str, &mut Param<T>)> {
        self.entries.iter_mut().enumerate().map(|(i, (n, p))| (ParamRef(i), n.as_str(), p))
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in &mut self.entries {
            p.zero_grad();
        }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, p)| p.value.numel()).sum()
    }
}
