//! Dense `f64` tensors and reverse-mode automatic differentiation.
//!
//! The whole training stack runs on row-major rank-1/rank-2 tensors and a
//! Wengert-list tape ([`GradTape`]). Ops are a closed catalogue
//! ([`OpKind`]): each entry has a forward kernel and a hand-derived
//! vector-Jacobian product, and every one of them is covered by a central
//! finite-difference check in the test suite.
//!
//! Design points worth knowing before touching this module:
//! * tensors are immutable; parameter updates build new tensors,
//! * a tape owns the values of every node it created, so backward can
//!   recompute nothing and read everything,
//! * `backward` walks the recorded applications strictly in reverse
//!   creation order, which is a valid reverse topological order by
//!   construction and keeps gradient accumulation bit-deterministic.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tape;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use gradcheck::finite_difference_check;
pub use optim::{clip_gradients_by_norm, OptimizerKind, OptimizerState};
pub use params::ParamSet;
pub use tape::{GradTape, Gradients, NodeId, OpKind};

use std::sync::Arc;

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64` values.
///
/// Supported ranks are 1 (`[n]`) and 2 (`[rows, cols]`); everything in the
/// pipeline is expressed in those, with sequences as `seq x width`
/// matrices and pooled embeddings as `1 x width` rows. The payload is
/// shared behind an [`Arc`] so cloning a tensor (which the tape does a
/// lot) never copies data.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, checking that the shape's element count matches
    /// the payload length and that the rank is 1 or 2.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::shape(
                "tensor.new",
                format!("rank {} unsupported, expected 1 or 2", shape.len()),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel == 0 {
            return Err(Error::shape("tensor.new", "zero-sized tensors are not allowed"));
        }
        if numel != data.len() {
            return Err(Error::shape(
                "tensor.new",
                format!("shape {:?} holds {} elements but payload has {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
        })
    }

    /// Rank-1 tensor from a vector.
    pub fn from_vec(data: Vec<f64>) -> Result<Tensor> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    /// Rank-2 tensor from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Single-element rank-1 tensor.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::new(vec![1], vec![value]).expect("scalar shape is always valid")
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; numel])
    }

    /// Tensor filled with one value.
    pub fn full(shape: &[usize], value: f64) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; numel])
    }

    /// Zero tensor with the same shape as `self`.
    pub fn zeros_like(&self) -> Tensor {
        Tensor::zeros(&self.shape).expect("existing shape is valid")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a rank-2 tensor; a rank-1 tensor counts as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Columns of a rank-2 tensor, or the length of a rank-1 tensor.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the payload. Copies if the payload is shared,
    /// which is exactly what a parameter update wants.
    pub fn data_mut(&mut self) -> &mut [f64] {
        let owned: &mut Vec<f64> = Arc::make_mut(&mut self.data);
        owned.as_mut_slice()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "tensor.item",
                format!("expected one element, tensor has {}", self.numel()),
            ));
        }
        Ok(self.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Tensor {
        self.requires_grad = flag;
        self
    }

    /// True when every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element at `(row, col)` of a rank-2 tensor.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[row * self.cols() + col]
    }

    /// Sum of squared entries, used for gradient norms.
    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Exact bitwise equality, including shape.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Largest absolute elementwise difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_payload() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn new_rejects_rank_zero_and_three() {
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn zero_sized_tensors_are_rejected() {
        assert!(Tensor::zeros(&[0]).is_err());
        assert!(Tensor::zeros(&[3, 0]).is_err());
    }

    #[test]
    fn clone_shares_payload_until_mutated() {
        let a = Tensor::from_vec(vec![1.0, 2.0]).unwrap();
        let mut b = a.clone();
        assert!(Arc::ptr_eq(&a.data, &b.data));
        b.data_mut()[0] = 9.0;
        assert_eq!(a.data()[0], 1.0);
        assert_eq!(b.data()[0], 9.0);
    }

    #[test]
    fn item_requires_single_element() {
        assert_eq!(Tensor::scalar(4.5).item().unwrap(), 4.5);
        assert!(Tensor::from_vec(vec![1.0, 2.0]).unwrap().item().is_err());
    }

    #[test]
    fn bits_eq_distinguishes_negative_zero() {
        let a = Tensor::scalar(0.0);
        let b = Tensor::scalar(-0.0);
        assert!(!a.bits_eq(&b));
        assert_eq!(a.max_abs_diff(&b), Some(0.0));
    }
}
