//! Central finite-difference oracle for analytic gradients.

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// `|a - n| / (|a| + |n| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    libm::fabs(analytic - numeric) / (libm::fabs(analytic) + libm::fabs(numeric) + 1e-12)
}

/// Central difference `(f(θ + eps e_i) - f(θ - eps e_i)) / 2 eps`.
pub fn numeric_gradient(
    f: &mut impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    index: usize,
    eps: f64,
) -> f64 {
    let mut probe = theta.to_vec();
    probe[index] = theta[index] + eps;
    let up = f(&probe);
    probe[index] = theta[index] - eps;
    let down = f(&probe);
    (up - down) / (2.0 * eps)
}

/// Maximum relative error between `analytic` and central differences of
/// `f` over every coordinate of `theta`.
///
/// `f` must be deterministic; any sampling inside it has to be seeded
/// identically on every call.
pub fn finite_diff_check(
    f: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    analytic: &[f64],
    eps: f64,
) -> Result<f64> {
    let all: Vec<usize> = (0..theta.len()).collect();
    finite_diff_check_at(f, theta, analytic, eps, &all)
}

/// As [`finite_diff_check`], restricted to the given coordinates.
pub fn finite_diff_check_at(
    mut f: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    analytic: &[f64],
    eps: f64,
    indices: &[usize],
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Contract("finite-difference eps must be > 0".into()));
    }
    if theta.len() != analytic.len() {
        return Err(Error::Dimension {
            op: "finite_diff_check",
            lhs: (theta.len(), 1),
            rhs: (analytic.len(), 1),
        });
    }
    let mut worst: f64 = 0.0;
    for &i in indices {
        let numeric = numeric_gradient(&mut f, theta, i, eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let err = finite_diff_check(|t| t[0] * t[0], &[3.0], &[6.0], 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let err = finite_diff_check(|t| t[0] * t[0], &[3.0], &[5.0], 1e-5).unwrap();
        assert!(err > 0.05);
    }

    #[test]
    fn rejects_bad_eps() {
        assert!(finite_diff_check(|t| t[0], &[1.0], &[1.0], 0.0).is_err());
    }
}
