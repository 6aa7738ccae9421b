use crate::error::{shape_err, LabError, Result};

pub const DEFAULT_GRAD_EPS: f64 = 1e-6;
pub const DEFAULT_GRAD_TOLERANCE: f64 = 1e-5;

/// Central differences `(f(x+εe_i) − f(x−εe_i)) / 2ε` for every coordinate.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let fp = f(&probe);
        probe[i] = orig - eps;
        let fm = f(&probe);
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(LabError::NumericalFailure(format!(
                "objective not finite around coordinate {i}"
            )));
        }
        grad.push((fp - fm) / (2.0 * eps));
    }
    Ok(grad)
}

/// `max_i |a_i − n_i| / max(1e-12, |a_i| + |n_i|)`.
pub fn gradient_report(analytic: &[f64], numeric: &[f64]) -> Result<f64> {
    if analytic.len() != numeric.len() {
        return Err(shape_err(format!(
            "gradient lengths {} vs {}",
            analytic.len(),
            numeric.len()
        )));
    }
    Ok(analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-12))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let g = finite_diff_gradient(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        let g = finite_diff_gradient(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-6).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-7 && (g[1] - 4.0).abs() < 1e-7);
        let g = finite_diff_gradient(|_| 5.0, &[1.0, 2.0], 1e-6).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn non_finite_objective_fails() {
        let r = finite_diff_gradient(|x| (x[0]).ln(), &[0.0], 1e-6);
        assert!(matches!(r, Err(LabError::NumericalFailure(_))));
    }

    #[test]
    fn report_formula() {
        assert_eq!(gradient_report(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((gradient_report(&[2.0], &[1.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        // the second coordinate hits the 1e-12 floor: 1e-13 / 1e-12
        let r = gradient_report(&[1.0, 0.0], &[1.0, 1e-13]).unwrap();
        assert!((r - 0.1).abs() < 1e-12);
        assert!(gradient_report(&[1.0], &[]).is_err());
    }
}
