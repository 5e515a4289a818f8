//! Finite-difference gradient oracle.
//!
//! Central differences evaluated through the plain forward pass, independent
//! of the tape's backward rules. Used throughout the test suite to verify
//! every analytic gradient.

/// Central-difference gradient of `f` at `x` with step `eps` per coordinate.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], eps: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe);
        probe[i] = x[i] - eps;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Relative error with a guarded denominator so that near-zero pairs compare
/// absolutely instead of blowing up.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

/// Worst relative error across two equal-length gradients.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        let x = vec![1.5, -2.0, 0.25];
        let g = central_diff(|v| v.iter().map(|t| t * t).sum(), &x, 1e-5);
        for (gi, xi) in g.iter().zip(&x) {
            assert!((gi - 2.0 * xi).abs() < 1e-8);
        }
    }

    #[test]
    fn relative_error_guards_near_zero() {
        assert!(relative_error(0.0, 1e-9) < 1e-2);
        assert!(relative_error(1.0, 2.0) > 0.3);
        assert_eq!(relative_error(3.0, 3.0), 0.0);
    }
}
