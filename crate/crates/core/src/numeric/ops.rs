use super::matrix::{CorrespondenceMap, FeatureGrid, Matrix};
use crate::error::{shape_err, LabError, Result};

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Temperature softmax with max subtraction.
pub fn softmax(v: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(LabError::EmptyInput("softmax input"));
    }
    if !(temperature > 0.0) {
        return Err(LabError::ConfigError(format!(
            "softmax temperature {temperature} must be positive"
        )));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(LabError::NumericalFailure("non-finite softmax logit".into()));
    }
    let mut out: Vec<f64> = v.iter().map(|x| ((x - max) / temperature).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|e| *e /= z);
    Ok(out)
}

/// Backward of `p = softmax(x / t)`: returns dL/dx given dL/dp.
pub fn softmax_backward(p: &[f64], grad_p: &[f64], temperature: f64) -> Vec<f64> {
    let s = dot(p, grad_p);
    p.iter()
        .zip(grad_p)
        .map(|(pi, gi)| pi * (gi - s) / temperature)
        .collect()
}

/// Normalises `v` in place and returns its original norm.
pub fn l2_normalize(v: &mut [f64]) -> Option<f64> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(n)
}

/// Backward of `y = x / ‖x‖` given `y`, `‖x‖` and dL/dy.
pub fn normalize_backward(y: &[f64], n: f64, grad_y: &[f64]) -> Vec<f64> {
    let s = dot(y, grad_y);
    y.iter().zip(grad_y).map(|(yi, gi)| (gi - yi * s) / n).collect()
}

pub fn l2_normalize_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        if l2_normalize(out.row_mut(r)).is_none() {
            return Err(LabError::DegenerateRow(r));
        }
    }
    Ok(out)
}

/// `S_ij = a_iᵀ b_j / 2 + 1/2` over all patch pairs of two normalised grids.
pub fn correspondence_map(a: &FeatureGrid, b: &FeatureGrid) -> Result<CorrespondenceMap> {
    if !a.is_normalized() || !b.is_normalized() {
        return Err(LabError::InvariantViolation(
            "correspondence map needs normalised grids".into(),
        ));
    }
    correspondence_map_raw(a, b)
}

pub(crate) fn correspondence_map_raw(a: &FeatureGrid, b: &FeatureGrid) -> Result<CorrespondenceMap> {
    if a.dim() != b.dim() {
        return Err(shape_err(format!("feature dims {} vs {}", a.dim(), b.dim())));
    }
    let (na, nb) = (a.num_patches(), b.num_patches());
    let m = Matrix::from_fn(na, nb, |i, j| dot(a.patch(i), b.patch(j)) * 0.5 + 0.5);
    Ok(CorrespondenceMap(m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_values() {
        let p = softmax(&[1.0, 2.0], 1.0).unwrap();
        assert!((p[0] - 0.268_941_421_369_995_1).abs() < 1e-15);
        assert!((p[1] - 0.731_058_578_630_004_9).abs() < 1e-15);
        let u = softmax(&[0.0; 3], 1.0).unwrap();
        assert!(u.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        let shifted = softmax(&[1.0 + 7.5, 2.0 + 7.5], 1.0).unwrap();
        assert!((shifted[0] - p[0]).abs() < 1e-12);
        assert!(matches!(softmax(&[], 1.0), Err(LabError::EmptyInput(_))));
    }

    #[test]
    fn softmax_survives_large_logits() {
        let p = softmax(&[1000.0, 0.0], 0.05).unwrap();
        assert_eq!(p[0], 1.0);
        assert!(p.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn normalize_rows() {
        let m = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let n = l2_normalize_rows(&m).unwrap();
        assert!((n.get(0, 0) - 0.6).abs() < 1e-15 && (n.get(0, 1) - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize_rows(&n).unwrap(), n);
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(l2_normalize_rows(&z), Err(LabError::DegenerateRow(1))));
    }

    #[test]
    fn correspondence_extremes() {
        let a = FeatureGrid::new(1, 3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0])
            .unwrap()
            .normalized()
            .unwrap();
        let b = FeatureGrid::new(1, 1, 2, vec![1.0, 0.0]).unwrap().normalized().unwrap();
        let s = correspondence_map(&a, &b).unwrap();
        assert_eq!(s.matrix().data(), &[1.0, 0.5, 0.0]);
        let c = FeatureGrid::new(1, 1, 3, vec![1.0, 0.0, 0.0])
            .unwrap()
            .normalized()
            .unwrap();
        assert!(matches!(correspondence_map(&a, &c), Err(LabError::ShapeError(_))));
        let raw = FeatureGrid::new(1, 1, 2, vec![2.0, 0.0]).unwrap();
        assert!(correspondence_map(&a, &raw).is_err());
    }
}
