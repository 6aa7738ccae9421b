//! Downstream evaluation: nearest-centroid classification, patch segmentation
//! accuracy on synthetic labels and the over-dispersion cosine statistics.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{shape_err, LabError, Result};
use crate::numeric::{dot, l2_normalize, FeatureGrid, Matrix};
use crate::synth::View;

/// Per-class mean embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    pub centroids: Matrix,
    pub counts: Vec<usize>,
}

impl CentroidSet {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }
}

/// Arithmetic class means (not renormalised).
pub fn class_centroids(z: &Matrix, labels: &[usize], k: usize) -> Result<CentroidSet> {
    if labels.len() != z.rows() {
        return Err(shape_err("one label per embedding row"));
    }
    let mut sums = Matrix::zeros(k, z.cols());
    let mut counts = vec![0usize; k];
    for (row, &y) in z.row_iter().zip(labels) {
        if y >= k {
            return Err(shape_err(format!("label {y} outside {k} classes")));
        }
        counts[y] += 1;
        for (s, v) in sums.row_mut(y).iter_mut().zip(row) {
            *s += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(LabError::EmptyClass(c));
        }
        sums.row_mut(c).iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(CentroidSet {
        centroids: sums,
        counts,
    })
}

/// `argmin_k ‖z − μ_k‖`, ties to the lowest class index.
pub fn knn_classify(z: &[f64], c: &CentroidSet) -> Result<usize> {
    if c.k() == 0 {
        return Err(LabError::EmptyInput("centroid set"));
    }
    if z.len() != c.centroids.cols() {
        return Err(shape_err("embedding and centroid dims differ"));
    }
    let mut best = (f64::INFINITY, 0usize);
    for (k, mu) in c.centroids.row_iter().enumerate() {
        let d: f64 = z.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, k);
        }
    }
    Ok(best.1)
}

/// Fraction of rows whose nearest centroid disagrees with the label.
pub fn error_rate(z: &Matrix, labels: &[usize], c: &CentroidSet) -> Result<f64> {
    if labels.len() != z.rows() {
        return Err(shape_err("one label per embedding row"));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let preds = crate::par::map_indexed(z.rows(), |i| knn_classify(z.row(i), c));
    let mut wrong = 0usize;
    for (p, y) in preds.into_iter().zip(labels) {
        if p? != *y {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / labels.len() as f64)
}

/// Anything that maps a view's input grid to per-patch embeddings.
pub trait PatchEncoder: Sync {
    fn encode(&self, view: &FeatureGrid) -> Result<FeatureGrid>;
}

/// Uses raw input features as embeddings.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityEncoder;

impl PatchEncoder for IdentityEncoder {
    fn encode(&self, view: &FeatureGrid) -> Result<FeatureGrid> {
        Ok(view.clone())
    }
}

impl<F> PatchEncoder for F
where
    F: Fn(&FeatureGrid) -> Result<FeatureGrid> + Sync,
{
    fn encode(&self, view: &FeatureGrid) -> Result<FeatureGrid> {
        self(view)
    }
}

/// Stacks per-patch embeddings of every view with their categories.
pub fn encode_patches(encoder: &dyn PatchEncoder, views: &[View]) -> Result<(Matrix, Vec<usize>)> {
    let encoded = crate::par::map_slice(views, |v| encoder.encode(&v.features));
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut dim = 0;
    for (e, v) in encoded.into_iter().zip(views) {
        let e = e?;
        dim = e.dim();
        rows.extend_from_slice(e.data());
        labels.extend_from_slice(&v.category);
    }
    Ok((Matrix::new(labels.len(), dim, rows)?, labels))
}

/// Centroids over all labelled patches (`n_classes` includes background).
pub fn patch_centroids(encoder: &dyn PatchEncoder, views: &[View], n_classes: usize) -> Result<CentroidSet> {
    let (z, y) = encode_patches(encoder, views)?;
    class_centroids(&z, &y, n_classes)
}

/// Fraction of patches whose nearest centroid matches the patch category.
pub fn patch_segmentation_accuracy(encoder: &dyn PatchEncoder, views: &[View], c: &CentroidSet) -> Result<f64> {
    let (z, y) = encode_patches(encoder, views)?;
    Ok(1.0 - error_rate(&z, &y, c)?)
}

/// Mean pairwise cosines `(intra-instance, intra-class across instances, inter-class)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overdispersion {
    pub intra_instance_cos: f64,
    pub intra_class_cos: f64,
    pub inter_class_cos: f64,
}

fn sq_norm(v: &[f64]) -> f64 {
    dot(v, v)
}

/// Sum-of-unit-vectors form: `Σ_{i≠j} u_iᵀu_j = ‖Σ u‖² − n` per group.
pub fn overdispersion_from_patches(z: &Matrix, class: &[usize], instance: &[u64]) -> Result<Overdispersion> {
    if class.len() != z.rows() || instance.len() != z.rows() {
        return Err(shape_err("one class and instance per row"));
    }
    let d = z.cols();
    let mut total = vec![0.0; d];
    let mut by_class: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    let mut by_inst: BTreeMap<(usize, u64), (Vec<f64>, usize)> = BTreeMap::new();
    for (i, row) in z.row_iter().enumerate() {
        let mut u = row.to_vec();
        l2_normalize(&mut u).ok_or(LabError::DegenerateRow(i))?;
        let add = |acc: &mut Vec<f64>| acc.iter_mut().zip(&u).for_each(|(a, b)| *a += b);
        add(&mut total);
        let e = by_class.entry(class[i]).or_insert_with(|| (vec![0.0; d], 0));
        add(&mut e.0);
        e.1 += 1;
        let e = by_inst
            .entry((class[i], instance[i]))
            .or_insert_with(|| (vec![0.0; d], 0));
        add(&mut e.0);
        e.1 += 1;
    }
    let n = z.rows() as f64;
    let inst_sq: f64 = by_inst.values().map(|(s, _)| sq_norm(s)).sum();
    let inst_n: f64 = by_inst.values().map(|(_, c)| *c as f64).sum();
    let inst_pairs: f64 = by_inst.values().map(|(_, c)| (*c * c) as f64).sum();
    let class_sq: f64 = by_class.values().map(|(s, _)| sq_norm(s)).sum();
    let class_pairs: f64 = by_class.values().map(|(_, c)| (*c * c) as f64).sum();
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { f64::NAN };
    Ok(Overdispersion {
        intra_instance_cos: ratio(inst_sq - inst_n, inst_pairs - inst_n),
        intra_class_cos: ratio(class_sq - inst_sq, class_pairs - inst_pairs),
        inter_class_cos: ratio(sq_norm(&total) - class_sq, n * n - class_pairs),
    })
}

/// Over-dispersion statistics over object patches (background excluded).
pub fn overdispersion_metric(encoder: &dyn PatchEncoder, views: &[View], background: usize) -> Result<Overdispersion> {
    let encoded = crate::par::map_slice(views, |v| encoder.encode(&v.features));
    let mut rows = Vec::new();
    let mut class = Vec::new();
    let mut inst = Vec::new();
    let mut dim = 0;
    for (vi, (e, v)) in encoded.into_iter().zip(views).enumerate() {
        let e = e?;
        dim = e.dim();
        for p in 0..e.num_patches() {
            if v.category[p] != background {
                rows.extend_from_slice(e.patch(p));
                class.push(v.category[p]);
                inst.push(((vi as u64) << 32) | u64::from(v.instance[p]));
            }
        }
    }
    overdispersion_from_patches(&Matrix::new(class.len(), dim, rows)?, &class, &inst)
}

/// Majority vote over the `k` most cosine-similar reference rows; vote ties go
/// to the lowest label, distance ties to the lowest row index.
pub fn knn_vote_classify(reference: &Matrix, labels: &[usize], query: &[f64], k: usize) -> Result<usize> {
    if reference.rows() == 0 || k == 0 {
        return Err(LabError::EmptyInput("vote reference set"));
    }
    let qn = dot(query, query).sqrt().max(f64::MIN_POSITIVE);
    let mut sims: Vec<(f64, usize)> = reference
        .row_iter()
        .enumerate()
        .map(|(i, r)| (dot(r, query) / (qn * dot(r, r).sqrt().max(f64::MIN_POSITIVE)), i))
        .collect();
    sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut votes: HashMap<usize, usize> = HashMap::new();
    for (_, i) in sims.iter().take(k) {
        *votes.entry(labels[*i]).or_default() += 1;
    }
    Ok(votes
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(l, _)| l)
        .expect("at least one vote"))
}

/// Vote k-NN accuracy of `query` rows against `reference` rows.
pub fn knn_vote_accuracy(
    reference: &Matrix,
    ref_labels: &[usize],
    query: &Matrix,
    query_labels: &[usize],
    k: usize,
) -> Result<f64> {
    if query.rows() == 0 {
        return Ok(0.0);
    }
    let preds = crate::par::map_indexed(query.rows(), |i| {
        knn_vote_classify(reference, ref_labels, query.row(i), k)
    });
    let mut right = 0usize;
    for (p, y) in preds.into_iter().zip(query_labels) {
        if p? == *y {
            right += 1;
        }
    }
    Ok(right as f64 / query.rows() as f64)
}

/// JSON evaluation record keyed by configuration hash and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

pub fn config_hash(config_text: &str) -> String {
    hex::encode(Sha256::digest(config_text.as_bytes()))
}
