//! Dense tensors: flat storage plus shape, with an optional gradient buffer.

use serde::{Deserialize, Serialize};

use super::AutodiffError;
use crate::scalar::Scalar;

/// A dense n-dimensional array in row-major layout.
///
/// `grad`, when present, always has the same length as `values`. Persistent
/// tensors (model parameters) accumulate gradients here between
/// [`Tape`](super::Tape) passes and an optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    values: Vec<F>,
    #[serde(skip)]
    grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    /// Builds a tensor from explicit values; errors if the shape does not
    /// match the value count or any value is non-finite.
    pub fn from_values(shape: Vec<usize>, values: Vec<F>) -> Result<Self, AutodiffError> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(AutodiffError::BadShape {
                shape,
                expected,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite {
                context: "tensor construction".to_string(),
            });
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            values: vec![F::zero(); len],
            grad: None,
        }
    }

    /// Single-element tensor with shape `[1]`.
    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    /// Mutable access to the raw values. Callers that write non-finite
    /// values will be rejected by the next primitive that consumes them.
    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[F]) {
        debug_assert_eq!(delta.len(), self.values.len());
        let grad = self
            .grad
            .get_or_insert_with(|| vec![F::zero(); self.values.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    /// Drops the gradient buffer.
    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Applies `p -= lr * scale * g` elementwise. Internal to the update
    /// rules, which have already validated the gradient's presence.
    pub(crate) fn apply_update(&mut self, lr: F, scale: F) {
        if let Some(grad) = &self.grad {
            for (v, g) in self.values.iter_mut().zip(grad) {
                *v = *v - lr * scale * *g;
            }
        }
    }

    pub(crate) fn grad_sq_norm(&self) -> F {
        match &self.grad {
            Some(g) => g.iter().map(|x| *x * *x).sum(),
            None => F::zero(),
        }
    }
}
