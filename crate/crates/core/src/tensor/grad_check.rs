//! Finite-difference verification of tape gradients.

use super::{TapeBase, TensorBase};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Compares the tape gradient of a scalar function against central finite
/// differences and returns the maximum relative error over all parameter
/// components. `f` must build its result from the watched tensors it is
/// given; evaluation failures and non-finite values surface as errors.
///
/// Relative error uses the denominator max(1, |analytic|, |numeric|), so
/// zero-gradient components compare at absolute scale.
pub fn grad_check<S, F>(f: F, params: &[TensorBase<S>], eps: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&TapeBase<S>, &[TensorBase<S>]) -> Result<TensorBase<S>>,
{
    let eval = |ps: &[TensorBase<S>]| -> Result<S> {
        let tape = TapeBase::new();
        let watched: Vec<_> = ps.iter().map(|p| tape.watch(p)).collect();
        let out = f(&tape, &watched)?;
        let v = out.item()?;
        if !v.is_finite() {
            return Err(Error::numeric("grad_check function evaluated to a non-finite value"));
        }
        Ok(v)
    };

    // Analytic gradients. A constant function never touches the tape; its
    // gradient is zero everywhere.
    let tape = TapeBase::new();
    let watched: Vec<_> = params.iter().map(|p| tape.watch(p)).collect();
    let out = f(&tape, &watched)?;
    if out.numel() != 1 {
        return Err(Error::dim("grad_check requires a scalar function"));
    }
    if out.requires_grad() {
        tape.backward(&out)?;
    }
    let analytic: Vec<Vec<S>> = watched
        .iter()
        .map(|w| w.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![S::zero(); w.numel()]))
        .collect();

    let mut worst = S::zero();
    for (pi, p) in params.iter().enumerate() {
        let base = p.to_vec();
        for ci in 0..base.len() {
            let mut plus = params.to_vec();
            let mut minus = params.to_vec();
            let mut vp = base.clone();
            vp[ci] += eps;
            let mut vm = base.clone();
            vm[ci] -= eps;
            plus[pi] = TensorBase::from_parts(p.shape().to_vec(), vp, None);
            minus[pi] = TensorBase::from_parts(p.shape().to_vec(), vm, None);
            let numeric = (eval(&plus)? - eval(&minus)?) / (S::from_f64(2.0) * eps);
            let a = analytic[pi][ci];
            let denom = S::one().max(a.abs()).max(numeric.abs());
            let rel = (a - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
