//! Sinkhorn-Knopp sharpening of target logits into balanced assignments.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numeric::{softmax, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    pub iterations: usize,
    pub temperature: f64,
    /// Stop early once every column sum is within this of `B/D`.
    pub tolerance: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            temperature: 0.05,
            tolerance: 1e-6,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(LabError::ConfigError("sinkhorn iterations must be >= 1".into()));
        }
        if !(self.temperature > 0.0) || !(self.tolerance > 0.0) {
            return Err(LabError::ConfigError(
                "sinkhorn temperature and tolerance must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Returns `Q ≥ 0` with unit row sums and column sums approaching `B/D`.
///
/// A single row has no batch to balance against, so it is returned as a
/// plain temperature softmax.
pub fn sinkhorn_normalize(logits: &Matrix, cfg: &SinkhornConfig) -> Result<Matrix> {
    cfg.validate()?;
    let (b, d) = (logits.rows(), logits.cols());
    if b == 0 || d == 0 {
        return Err(LabError::EmptyInput("sinkhorn logits"));
    }
    if b == 1 {
        let row = softmax(logits.row(0), cfg.temperature)?;
        return Matrix::new(1, d, row);
    }

    let mut q = logits.clone();
    for r in 0..b {
        let row = q.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = ((*v - max) / cfg.temperature).exp());
    }

    let col_target = b as f64 / d as f64;
    let mut col = vec![0.0; d];
    for _ in 0..cfg.iterations {
        column_sums(&q, &mut col);
        for (c, s) in col.iter().enumerate() {
            if !(*s > 0.0) || !s.is_finite() {
                return Err(LabError::NumericalFailure(format!("sinkhorn column {c} has mass {s}")));
            }
        }
        for r in 0..b {
            for (v, s) in q.row_mut(r).iter_mut().zip(&col) {
                *v *= col_target / s;
            }
        }
        normalize_rows(&mut q)?;

        column_sums(&q, &mut col);
        let dev = col.iter().fold(0.0_f64, |m, s| m.max((s - col_target).abs()));
        if dev <= cfg.tolerance {
            break;
        }
    }
    Ok(q)
}

fn column_sums(q: &Matrix, out: &mut [f64]) {
    out.iter_mut().for_each(|s| *s = 0.0);
    for row in q.row_iter() {
        for (s, v) in out.iter_mut().zip(row) {
            *s += v;
        }
    }
}

fn normalize_rows(q: &mut Matrix) -> Result<()> {
    for r in 0..q.rows() {
        let row = q.row_mut(r);
        let s: f64 = row.iter().sum();
        if !(s > 0.0) || !s.is_finite() {
            return Err(LabError::NumericalFailure(format!("sinkhorn row {r} has mass {s}")));
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::RngState;

    fn cfg(iterations: usize, temperature: f64) -> SinkhornConfig {
        SinkhornConfig {
            iterations,
            temperature,
            tolerance: 1e-12,
        }
    }

    #[test]
    fn equal_logits_give_uniform() {
        let m = Matrix::from_fn(5, 4, |_, _| 0.3);
        let q = sinkhorn_normalize(&m, &SinkhornConfig::default()).unwrap();
        assert!(q.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn single_row_is_softmax() {
        let m = Matrix::from_rows(&[vec![0.1, 0.4, -0.2]]).unwrap();
        let q = sinkhorn_normalize(&m, &cfg(3, 0.5)).unwrap();
        let s = softmax(m.row(0), 0.5).unwrap();
        assert_eq!(q.row(0), &s[..]);
    }

    #[test]
    fn two_by_two_fixed_point() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let q = sinkhorn_normalize(&m, &cfg(100, 0.1)).unwrap();
        // symmetric problem: the row softmax is already balanced
        let eps = 1.0 / (1.0 + 10f64.exp());
        assert!((q.get(0, 1) - eps).abs() < 1e-12);
        assert!((q.get(1, 0) - eps).abs() < 1e-12);
        for c in 0..2 {
            assert!((q.get(0, c) + q.get(1, c) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rows_sum_to_one_even_after_one_iteration() {
        let mut rng = RngState::new(3);
        let m = Matrix::new(7, 5, rng.normal_vec(35, 1.0)).unwrap();
        let q = sinkhorn_normalize(&m, &cfg(1, 0.05)).unwrap();
        for row in q.row_iter() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_config() {
        let m = Matrix::zeros(2, 2);
        assert!(sinkhorn_normalize(&m, &cfg(0, 0.1)).is_err());
        assert!(sinkhorn_normalize(&m, &cfg(1, 0.0)).is_err());
    }
}
