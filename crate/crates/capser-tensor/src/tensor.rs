use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Result, Scalar, TensorError};

/// A dense row-major array with an optional gradient of the same shape.
///
/// A scalar is rank 0 (`shape == []`, one element). Equality is bitwise on
/// shape, data, gradient, and the `requires_grad` flag, which is what the
/// reproducibility tests rely on.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar = f64> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub grad: Option<Vec<S>>,
    pub requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor from raw parts, checking that `data` fills `shape`.
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::Shape(format!(
                "{} elements do not fill shape {:?} ({} expected)",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
            grad: None,
            requires_grad: false,
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    /// Gaussian-initialized tensor with standard deviation `std`.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                S::from_f64(z * std)
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        }
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
