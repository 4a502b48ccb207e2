//! Central finite-difference verification of backpropagated gradients.

use super::{AutodiffError, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Compares backpropagated gradients of a scalar function against central
/// finite differences and returns the worst relative error over every
/// entry of every parameter.
///
/// `build` constructs the function on the given tape from leaves that
/// mirror `params` (same order). It is called many times and must be
/// deterministic; two evaluations at the same point are compared and a
/// mismatch is an error.
///
/// The relative error of one entry is `|a − n| / max(|a|, |n|, 1e-4)`;
/// the floor keeps finite-difference roundoff noise on near-zero entries
/// from registering as error.
pub fn grad_check<F, B>(
    params: &[Tensor<F>],
    epsilon: F,
    mut build: B,
) -> Result<F, AutodiffError>
where
    F: Scalar,
    B: FnMut(&Tape<F>, &[Var<F>]) -> Result<Var<F>, AutodiffError>,
{
    if !(epsilon > F::zero()) || !epsilon.is_finite() {
        return Err(AutodiffError::InvalidHyper(format!(
            "grad check epsilon must be positive and finite, got {epsilon}"
        )));
    }

    fn eval<F: Scalar, B>(
        build: &mut B,
        tensors: &[Tensor<F>],
    ) -> Result<(Tape<F>, Vec<Var<F>>, Var<F>), AutodiffError>
    where
        B: FnMut(&Tape<F>, &[Var<F>]) -> Result<Var<F>, AutodiffError>,
    {
        let tape = Tape::new();
        let vars: Vec<Var<F>> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&tape, &vars)?;
        if loss.shape().iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: loss.shape().to_vec(),
            });
        }
        Ok((tape, vars, loss))
    }

    let (tape, vars, loss) = eval(&mut build, params)?;
    let first = tape.scalar_value(&loss);
    let (tape2, _, loss2) = eval(&mut build, params)?;
    let second = tape2.scalar_value(&loss2);
    if first != second {
        return Err(AutodiffError::NonDeterministic {
            first: first.to_f64_lossy(),
            second: second.to_f64_lossy(),
        });
    }
    tape.backward(&loss)?;
    let analytic: Vec<Vec<F>> = vars.iter().map(|v| tape.grad(v)).collect();

    let floor = F::from_f64_lossy(1e-4);
    let two_eps = epsilon + epsilon;
    let mut worst = F::zero();
    let mut work: Vec<Tensor<F>> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for j in 0..param.len() {
            let orig = param.values()[j];
            work[pi].values_mut()[j] = orig + epsilon;
            let (tp, _, lp) = eval(&mut build, &work)?;
            let f_plus = tp.scalar_value(&lp);
            work[pi].values_mut()[j] = orig - epsilon;
            let (tm, _, lm) = eval(&mut build, &work)?;
            let f_minus = tm.scalar_value(&lm);
            work[pi].values_mut()[j] = orig;

            let numeric = (f_plus - f_minus) / two_eps;
            let a = analytic[pi][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
