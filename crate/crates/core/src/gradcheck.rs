//! Finite-difference verification of reverse-mode gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares reverse-mode gradients of `forward` against central differences.
///
/// `forward` receives a fresh tape and one var per entry of `params`, and
/// must return a scalar loss. It must be deterministic. Returns the worst
/// coordinate-wise relative error, using `max(|analytic|, |numeric|, 1e-8)`
/// as the denominator.
pub fn grad_check<F>(forward: F, params: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(epsilon > 0.0) {
        return Err(Error::contract("grad_check epsilon must be positive"));
    }
    let mut params: Vec<Tensor> = params.iter().map(|p| p.clone().requiring_grad()).collect();

    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p)).collect();
        let loss = forward(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };

    let eval = |params: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p)).collect();
        Ok(forward(&tape, &vars)?.item())
    };

    let mut worst = 0.0f64;
    for pi in 0..params.len() {
        for k in 0..params[pi].len() {
            let orig = params[pi].data()[k];
            params[pi].data_mut()[k] = orig + epsilon;
            let plus = eval(&params)?;
            params[pi].data_mut()[k] = orig - epsilon;
            let minus = eval(&params)?;
            params[pi].data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[pi][k];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_loss_is_tight() {
        let p = Tensor::vector(vec![0.7, -1.3, 2.1]);
        let err = grad_check(|_, v| Ok(v[0].square().sum()), &[p], 1e-5).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn constant_closure_has_zero_error() {
        let p = Tensor::vector(vec![1.0, 2.0]);
        let err = grad_check(|t, _| Ok(t.scalar(3.0)), &[p], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_non_positive_epsilon() {
        let p = Tensor::vector(vec![1.0]);
        assert!(grad_check(|_, v| Ok(v[0].sum()), &[p], 0.0).is_err());
    }

    #[test]
    fn detects_wrong_gradient() {
        // Within epsilon of the kink of abs the central difference flattens.
        let p = Tensor::vector(vec![1e-7]);
        let err = grad_check(|_, v| Ok(v[0].abs().sum()), &[p], 1e-5).unwrap();
        assert!(err > 0.5, "{err}");
    }
}
