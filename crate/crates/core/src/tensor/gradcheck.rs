use super::TensorError;

/// Compares an analytic gradient against central differences at every coordinate.
///
/// `f` returns the function value and its analytic gradient at a point. The
/// result is the maximum over coordinates of `|analytic − numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, point: &[f64], eps: f64) -> Result<f64, TensorError>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(f, point, eps, &coords)
}

/// [`grad_check`] restricted to a subset of coordinates.
pub fn grad_check_coords<F>(mut f: F, point: &[f64], eps: f64, coords: &[usize]) -> Result<f64, TensorError>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if point.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::Evaluation("grad_check point is not finite".into()));
    }
    let (value, analytic) = f(point);
    if !value.is_finite() {
        return Err(TensorError::Evaluation(format!("function value {value} at the base point")));
    }
    if analytic.len() != point.len() {
        return Err(TensorError::InvalidShape(format!(
            "analytic gradient has {} entries for a {}-dimensional point",
            analytic.len(),
            point.len()
        )));
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = x[i];
        x[i] = orig + eps;
        let (fp, _) = f(&x);
        x[i] = orig - eps;
        let (fm, _) = f(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(TensorError::Evaluation(format!("non-finite value perturbing coordinate {i}")));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let c = [1.5, -2.0, 0.25, 7.0];
        let f = |x: &[f64]| (x.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>() + 3.0, c.to_vec());
        let err = grad_check(f, &[0.1, 0.2, -0.3, 4.0], 1e-4).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let f = |x: &[f64]| (x[0] * x[0], vec![x[0]]);
        let err = grad_check(f, &[3.0], 1e-5).unwrap();
        assert!((err - 0.5).abs() < 1e-6);
    }

    #[test]
    fn nonfinite_value_is_an_error() {
        let f = |x: &[f64]| (1.0 / x[0], vec![-1.0 / (x[0] * x[0])]);
        assert!(matches!(grad_check(f, &[0.0], 1e-5), Err(TensorError::Evaluation(_))));
    }
}
