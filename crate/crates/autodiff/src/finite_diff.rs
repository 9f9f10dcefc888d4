//! Central finite-difference gradient checking.

use crate::error::AutodiffError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar function against central
/// differences and returns the largest relative error over coordinates,
/// `|analytic - numeric| / (|analytic| + 1e-8)`.
///
/// `f` receives a fresh tape and the trainable input bound to `point`.
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, AutodiffError>,
{
    let eval = |p: &Tensor| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let x = tape.param("x", p.clone())?;
        let out = f(&mut tape, x)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(AutodiffError::NonScalarRoot {
                shape: v.shape().to_vec(),
            });
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(AutodiffError::NonFiniteFunction(v));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let x = tape.param("x", point.clone())?;
    let out = f(&mut tape, x)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / (a.abs() + 1e-8));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_at_two() {
        let err = finite_diff_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                let cube = t.mul(sq, x)?;
                t.sum(cube)
            },
            &Tensor::scalar(2.0),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = finite_diff_check(
            |t, _x| t.constant(Tensor::scalar(3.0)),
            &Tensor::column(vec![1.0, 2.0]),
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn sum_of_vector() {
        let p = Tensor::column((0..10).map(|i| i as f64 * 0.3 - 1.0).collect());
        let err = finite_diff_check(|t, x| t.sum(x), &p, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn non_finite_value_is_an_error() {
        // log at 0 - step is undefined
        let r = finite_diff_check(
            |t, x| {
                let l = t.log(x)?;
                t.sum(l)
            },
            &Tensor::scalar(1e-6),
            1e-5,
        );
        assert!(r.is_err());
    }
}
