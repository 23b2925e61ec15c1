//! Dense f64 tensors and a tape-based reverse-mode autodiff engine.
//!
//! Everything is stored row-major in flat `Vec<f64>` buffers. A forward pass
//! records one [`tape::Op`] node per operation onto a [`tape::Tape`]; calling
//! [`tape::Tape::backward`] walks the nodes in reverse creation order and
//! accumulates gradients. The tape is cheap to build and is reconstructed for
//! every forward pass rather than mutated in place.
//!
//! All kernels are single-threaded with fixed iteration order, so forward
//! values and gradients are bitwise reproducible for identical inputs.

mod tape;


pub use tape::{Tape, ValueId};

/// A plain value-level tensor: shape plus row-major storage and an optional
/// gradient of identical shape. This is what parameter stores hold; tape nodes
/// keep their own copies while a pass is alive.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            numel(shape),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(shape, vec![0.0; numel(shape)])
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor::new(shape, vec![v; numel(shape)])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Zero (allocating if needed) the gradient buffer.
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}
