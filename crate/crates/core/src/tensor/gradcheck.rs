use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Compares the tape gradient of a scalar function against central finite
/// differences at `point` and returns the largest relative error over all
/// coordinates.
///
/// `f` receives a fresh tape and the variable holding the (perturbed) point
/// and must return a scalar variable.
pub fn finite_difference_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {eps}")));
    }
    let eval = |x: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.param(0, x);
        let out = f(&mut tape, v)?;
        let y = tape.value(out).item()?;
        if !y.is_finite() {
            return Err(Error::NonFinite("finite-difference evaluation"));
        }
        Ok(y)
    };

    let mut tape = Tape::new();
    let v = tape.param(0, point);
    let out = f(&mut tape, v)?;
    let analytic = tape.backward(out)?.remove(&0).expect("parameter registered");

    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let point = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = finite_difference_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                tape.sum(sq)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn zero_step_rejected() {
        let point = Tensor::scalar(1.0);
        let r = finite_difference_check(|tape, x| tape.sum(x), &point, 0.0);
        assert!(matches!(r, Err(Error::Invalid(_))));
    }
}
