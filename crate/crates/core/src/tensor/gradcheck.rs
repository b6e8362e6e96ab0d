//! Central finite-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Floor on the denominator of the relative error, so coordinates whose true
/// derivative is zero are judged by absolute error instead.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Maximum relative error between the tape gradient of scalar `f` at `x` and a
/// central difference with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|vars| f(vars[0]), std::slice::from_ref(x), h)
}

/// [`grad_check`] over several inputs at once; the error is the maximum over all of them.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&vars)?;
        if out.len() != 1 {
            return Err(Error::Contract(format!(
                "gradient check needs a scalar function, got shape {:?}",
                out.shape()
            )));
        }
        tape.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };

    let eval = |point: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&vars)?.item())
    };

    let mut worst = 0.0f64;
    let mut point = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[which].len() {
            let original = inputs[which].data()[i];
            point[which].data_mut()[i] = original + h;
            let plus = eval(&point)?;
            point[which].data_mut()[i] = original - h;
            let minus = eval(&point)?;
            point[which].data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let err = grad_check(|v| Ok(v.sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn sum_of_squares() {
        let x = Tensor::vector(vec![0.7, -0.4, 1.9, -2.2]);
        let err = grad_check(|v| Ok(v.square().sum()), &x, 1e-5).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // guarded_sqrt with a huge guard has a deliberately wrong derivative
        let x = Tensor::vector(vec![0.5, 2.0]);
        let err = grad_check(|v| Ok(v.guarded_sqrt(10.0).sum()), &x, 1e-5).unwrap();
        assert!(err > 0.1, "{err}");
    }
}
