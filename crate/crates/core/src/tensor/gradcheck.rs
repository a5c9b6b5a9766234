//! Central finite differences for checking analytic gradients.

use crate::error::{Error, Result};

/// Numerical gradient of `f` at `params` by central differences.
pub fn central_differences<F>(mut f: F, params: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::contract(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut point = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        point[i] = params[i] + step;
        let plus = eval(&mut f, &point)?;
        point[i] = params[i] - step;
        let minus = eval(&mut f, &point)?;
        point[i] = params[i];
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

fn eval<F: FnMut(&[f64]) -> Result<f64>>(f: &mut F, p: &[f64]) -> Result<f64> {
    let v = f(p)?;
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("function returned {v}")));
    }
    Ok(v)
}

/// `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compares `grad(params)` against central differences of `f` and returns
/// the worst relative error over all coordinates.
pub fn finite_difference_check<F, G>(f: F, grad: G, params: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
    G: FnOnce(&[f64]) -> Result<Vec<f64>>,
{
    let numeric = central_differences(f, params, step)?;
    let analytic = grad(params)?;
    if analytic.len() != params.len() {
        return Err(Error::contract(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Matrix, Ops, Tape};

    #[test]
    fn quadratic_and_linear() {
        let err =
            finite_difference_check(|p| Ok(p[0] * p[0]), |p| Ok(vec![2.0 * p[0]]), &[3.0], 1e-5)
                .unwrap();
        assert!(err < 1e-8, "{err}");
        let err = finite_difference_check(
            |p| Ok(2.0 * p[0] - 0.5 * p[1] + 1.0),
            |_| Ok(vec![2.0, -0.5]),
            &[0.3, -4.0],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn softmax_composite() {
        // f(x) = sum_j softmax(x / 2)_j * c_j
        let c = Matrix::row_vector(&[0.5, -1.0, 2.0, 0.25]).unwrap();
        let params = [0.1, -0.7, 1.3, 0.4];
        let f = |p: &[f64]| {
            let s = Matrix::row_vector(p)?.row_softmax(2.0);
            Ok(s.hadamard(&c)?.sum())
        };
        let grad = |p: &[f64]| {
            let mut tape = Tape::new();
            let x = tape.leaf(Matrix::row_vector(p)?);
            let cv = tape.leaf(c.clone());
            let s = tape.row_softmax(&x, 2.0);
            let out = tape.matmul_transposed(&s, &cv)?;
            Ok(tape.backward(out)?.get(x).data().to_vec())
        };
        let err = finite_difference_check(f, grad, &params, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        assert!(central_differences(|_| Ok(0.0), &[1.0], 0.0).is_err());
        let err = central_differences(|p| Ok(1.0 / (p[0] - p[0])), &[1.0], 1e-3).unwrap_err();
        assert!(matches!(err, Error::Evaluation(_)));
    }
}
