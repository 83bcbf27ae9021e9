//! Dense tensor kernel with reverse-mode automatic differentiation.
//!
//! Tensors are immutable row-major buffers. Attaching a tensor to a
//! [`TapeBase`] (via [`TapeBase::watch`]) makes every subsequent operation on
//! it record a node; `backward` on a scalar result then fills per-node
//! gradients in one reverse sweep. Tapes are build-once / backward-once and
//! confined to a single thread.

mod grad_check;
mod linalg;
mod ops;
mod sample;
mod scan;
mod tape;

pub use grad_check::grad_check;
pub use linalg::plain_matexp;
pub use ops::{concat, cross_entropy_cols, gather_cols, im2col, masked_softmax_cols, scatter_cols};
pub use scan::scan_linear;
pub use tape::TapeBase;

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub(crate) use tape::NodeRef;

/// Dense N-dimensional array of scalars, optionally attached to a tape.
pub struct TensorBase<S: Scalar> {
    shape: Vec<usize>,
    data: Rc<Vec<S>>,
    node: Option<NodeRef<S>>,
}

impl<S: Scalar> Clone for TensorBase<S> {
    fn clone(&self) -> Self {
        TensorBase { shape: self.shape.clone(), data: Rc::clone(&self.data), node: self.node.clone() }
    }
}

impl<S: Scalar> std::fmt::Debug for TensorBase<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<S: Scalar> TensorBase<S> {
    /// Builds a tensor, rejecting shape/data mismatches and non-finite values.
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel_of(shape),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("tensor constructor received non-finite value"));
        }
        Ok(TensorBase { shape: shape.to_vec(), data: Rc::new(data), node: None })
    }

    pub fn scalar(v: S) -> Result<Self> {
        Self::from_vec(&[], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        TensorBase { shape: shape.to_vec(), data: Rc::new(vec![S::zero(); numel_of(shape)]), node: None }
    }

    pub fn full(shape: &[usize], v: S) -> Result<Self> {
        Self::from_vec(shape, vec![v; numel_of(shape)])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one()).expect("finite")
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![S::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = S::one();
        }
        TensorBase { shape: vec![n, n], data: Rc::new(data), node: None }
    }

    /// Gaussian-initialized tensor (mean 0, given standard deviation).
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..numel_of(shape)).map(|_| S::from_f64(dist.sample(rng))).collect();
        TensorBase { shape: shape.to_vec(), data: Rc::new(data), node: None }
    }

    /// Uniform on [lo, hi).
    pub fn rand_uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel_of(shape)).map(|_| S::from_f64(rng.gen_range(lo..hi))).collect();
        TensorBase { shape: shape.to_vec(), data: Rc::new(data), node: None }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<S>, node: Option<NodeRef<S>>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        TensorBase { shape, data: Rc::new(data), node }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.data.to_vec()
    }

    /// Element accessor by multi-index; test and glue convenience.
    pub fn at(&self, idx: &[usize]) -> S {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        let strides = strides_of(&self.shape);
        let mut off = 0;
        for (d, &i) in idx.iter().enumerate() {
            assert!(i < self.shape[d], "index out of range");
            off += i * strides[d];
        }
        self.data[off]
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.numel() != 1 {
            return Err(Error::dim(format!("item() on tensor of shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Gradient recorded by the last backward pass, as a detached tensor.
    pub fn grad(&self) -> Option<TensorBase<S>> {
        let node = self.node.as_ref()?;
        let g = node.tape.grad_buffer(node.idx)?;
        Some(TensorBase { shape: self.shape.clone(), data: Rc::new(g), node: None })
    }

    /// Same values, no tape participation.
    pub fn detach(&self) -> TensorBase<S> {
        TensorBase { shape: self.shape.clone(), data: Rc::clone(&self.data), node: None }
    }

    pub(crate) fn node(&self) -> Option<&NodeRef<S>> {
        self.node.as_ref()
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<S>> {
        Rc::clone(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Max absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &TensorBase<S>) -> S {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), |m, d| if d > m { d } else { m })
    }
}

#[cfg(test)]
mod tests;
