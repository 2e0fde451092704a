//! Central finite differences, used as the oracle for analytic gradients.

use super::{Ops, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for relative errors.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Central-difference estimate of `∂f/∂x`, one coordinate at a time.
pub fn finite_difference_grad<T: Real>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    if eps <= T::zero() {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let two = T::one() + T::one();
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (two * eps));
    }
    Tensor::from_vec(x.shape().to_vec(), grad)
}

/// Largest elementwise `|a − n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> Result<f64> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::InvalidArgument(format!(
            "gradient shapes differ: {:?} vs {:?}",
            analytic.shape(),
            numeric.shape()
        )));
    }
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR))
        .fold(0.0, f64::max))
}

/// Builds a scalar from leaf variables on a tape.
pub type ScalarFn = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Compares reverse-mode gradients of `build` against central differences
/// for every input, returning the worst relative error seen.
pub fn check_gradients(build: &ScalarFn, inputs: &[Tensor<f64>], eps: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        let eval = |probe: &Tensor<f64>| -> Result<f64> {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, x)| t.leaf(if j == i { probe.clone() } else { x.clone() }))
                .collect();
            let r = build(&mut t, &vs)?;
            t.value(&r).item()
        };
        let numeric = finite_difference_grad(eval, &inputs[i], eps)?;
        let analytic = grads.get(*var).expect("every leaf has a gradient");
        worst = worst.max(max_relative_error(analytic, &numeric)?);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_cubic() {
        let x: Tensor<f64> = Tensor::from_vec([3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = finite_difference_grad(|t| Ok(t.data().iter().map(|v| v * v * v).sum::<f64>()), &x, 1e-5).unwrap();
        for (gi, xi) in g.data().iter().zip(x.data()) {
            assert!((gi - 3.0 * xi * xi).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_non_positive_eps() {
        let x = Tensor::<f64>::zeros([1]).unwrap();
        assert!(finite_difference_grad(|_| Ok(0.0), &x, 0.0).is_err());
    }

    #[test]
    fn floor_applies_to_tiny_gradients() {
        let a = Tensor::from_vec([2], vec![0.0, 1.0]).unwrap();
        let n = Tensor::from_vec([2], vec![1e-12, 1.0]).unwrap();
        assert!(max_relative_error(&a, &n).unwrap() <= 1e-4);
    }
}
