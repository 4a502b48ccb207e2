//! Parameter updates with global-norm gradient clipping.

use super::{AutodiffError, Tensor};
use crate::scalar::Scalar;

/// Pluggable update rule. Implementations read each parameter's gradient
/// (already accumulated by backpropagation) and mutate its values;
/// `clip_scale` is the global-norm clipping factor in `(0, 1]` and must
/// be folded into the applied delta.
pub trait UpdateRule<F: Scalar> {
    fn update(&mut self, index: usize, param: &mut Tensor<F>, lr: F, clip_scale: F);
}

/// Plain stochastic gradient descent: `p ← p − lr·clip_scale·grad`.
#[derive(Debug, Default, Clone, Copy)]
pub struct Sgd;

impl<F: Scalar> UpdateRule<F> for Sgd {
    fn update(&mut self, _index: usize, param: &mut Tensor<F>, lr: F, clip_scale: F) {
        param.apply_update(lr, clip_scale);
    }
}

/// Applies one update to every parameter, then clears their gradients.
///
/// The clipping threshold applies to the joint gradient vector of all
/// `params`: if its Euclidean norm exceeds `clip`, every gradient is
/// scaled by `clip / norm` before the rule runs. `clip` may be infinite
/// to disable clipping; it may not be zero, negative or NaN.
pub fn optimizer_step<F: Scalar, R: UpdateRule<F>>(
    params: &mut [&mut Tensor<F>],
    lr: F,
    clip: F,
    rule: &mut R,
) -> Result<(), AutodiffError> {
    if !(lr > F::zero()) || !lr.is_finite() {
        return Err(AutodiffError::InvalidHyper(format!(
            "learning rate must be positive and finite, got {lr}"
        )));
    }
    if !(clip > F::zero()) {
        return Err(AutodiffError::InvalidHyper(format!(
            "clip threshold must be positive, got {clip}"
        )));
    }
    for (index, p) in params.iter().enumerate() {
        if p.grad().is_none() {
            return Err(AutodiffError::MissingGrad { index });
        }
    }

    let sq_norm: F = params.iter().map(|p| p.grad_sq_norm()).sum();
    let norm = sq_norm.sqrt();
    let clip_scale = if norm > clip { clip / norm } else { F::one() };

    for (index, p) in params.iter_mut().enumerate() {
        rule.update(index, p, lr, clip_scale);
    }
    for p in params.iter_mut() {
        p.clear_grad();
    }
    Ok(())
}
