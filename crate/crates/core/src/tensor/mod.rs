//! Dense f64 tensors and a reverse-mode automatic-differentiation graph.
//!
//! Ops are eager: applying one computes its output immediately and records
//! the node on a tape, so a single reverse sweep from any node yields
//! gradients for every `requires_grad` ancestor. Gradients accumulate with
//! `+=`; callers zero them between optimizer steps.

mod container;
mod graph;

pub use container::{read_container, write_container, ContainerError};
pub use graph::{Graph, NodeId, OpKind};

use std::fmt;

/// Errors surfaced by tensor construction and graph ops.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Two operand shapes are incompatible for the named op.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single shape is unusable for the named op.
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    /// Backward was seeded with the wrong shape.
    SeedShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    /// A value that must stay finite became NaN or infinite.
    NonFinite { context: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            TensorError::InvalidShape { op, shape, reason } => {
                write!(f, "{op}: invalid shape {shape:?} ({reason})")
            }
            TensorError::SeedShapeMismatch { expected, got } => {
                write!(f, "backward seed shape {got:?} does not match output {expected:?}")
            }
            TensorError::NonFinite { context } => write!(f, "non-finite value in {context}"),
        }
    }
}

impl std::error::Error for TensorError {}

/// Dense n-dimensional f64 array in row-major order, with an optional
/// gradient buffer of the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                op: "tensor",
                shape,
                reason: "zero dimension".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidShape {
                op: "tensor",
                shape,
                reason: format!("product does not match data length {}", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Copy with identical values that no graph will differentiate through.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zero_grad(&mut self) {
        if self.requires_grad {
            match &mut self.grad {
                Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
                None => self.grad = Some(vec![0.0; self.data.len()]),
            }
        }
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_data_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn detach_drops_grad_tracking() {
        let mut t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad();
        t.zero_grad();
        let d = t.detach();
        assert_eq!(d.data(), &[1.0, 2.0]);
        assert!(!d.requires_grad);
        assert!(d.grad.is_none());
    }

    #[test]
    fn accumulate_grad_adds() {
        let mut t = Tensor::zeros(vec![2]).with_grad();
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[0.5, 0.5]);
        assert_eq!(t.grad.as_deref(), Some(&[1.5, 2.5][..]));
    }
}
