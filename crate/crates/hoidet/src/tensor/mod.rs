//! Dense f64 tensors with tape-based reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: row-major `f64` storage, explicit
//! shapes (no broadcasting except scalar-vs-tensor for add/mul), and a
//! [`Tape`] that records every operation so one backward pass can serve a
//! multi-term loss. Masked attention uses an additive mask whose "minus
//! infinity" is [`NEG_INF`], the most negative finite float; softmax treats
//! anything at or below [`MASK_CUTOFF`] as masked and gives it exactly zero
//! weight and zero gradient, so no NaN can enter through masking.

mod ops;
mod tape;

pub mod gradcheck;

pub use tape::{Gradients, Tape};

use crate::{Error, Result};

/// Additive-mask stand-in for −∞. Finite so that mask arithmetic
/// (`scores + mask`) never produces NaN or a true infinity.
pub const NEG_INF: f64 = f64::MIN;

/// Entries at or below this are treated as masked by softmax-family ops.
/// Halfway to [`NEG_INF`] so that `finite_score + NEG_INF` still qualifies.
pub const MASK_CUTOFF: f64 = f64::MIN * 0.5;

/// Identifies a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub tape: u64,
    pub idx: usize,
}

/// Dense n-dimensional value. Cloning copies the data; tensors detached
/// from any tape are immutable in practice and safe to share across threads.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    node: Option<NodeRef>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::BadShape {
                op: "Tensor::new",
                shape: shape.to_vec(),
                reason: format!("shape wants {} elements, data has {}", numel, data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            node: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            node: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Tensor {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            node: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(&[rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub(crate) fn node(&self) -> Option<NodeRef> {
        self.node
    }

    pub(crate) fn with_node(mut self, node: NodeRef, requires_grad: bool) -> Tensor {
        self.node = Some(node);
        self.requires_grad = requires_grad;
        self
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar(), "item() on non-scalar");
        self.data[0]
    }

    /// Detached copy: same values, no tape attachment.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            node: None,
        }
    }

    /// Element at a row-major 2-D position.
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    /// Borrow one row of a 2-D tensor.
    pub fn row_slice(&self, r: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    /// Reshape without touching data (row-major layout preserved).
    /// Detaches from the tape; use [`Tape::reshape`] for a tracked reshape.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }
}

/// Max relative error between two equally shaped slices, with the
/// denominator floored so near-zero pairs compare absolutely.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst: f64 = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let denom = x.abs().max(y.abs()).max(floor);
        worst = worst.max((x - y).abs() / denom);
    }
    worst
}
