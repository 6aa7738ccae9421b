//! Cross-view alignment losses, RoI overlap extraction between views and the
//! nearest-neighbour table behind the image-level concentration loss.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, LabError, Result};
use crate::numeric::{dot, l2_normalize, norm, normalize_backward, softmax, FeatureGrid, Matrix, RngState};
use crate::sinkhorn::{sinkhorn_normalize, SinkhornConfig};

pub const PROB_FLOOR: f64 = 1e-300;

/// `−Σ q_i log p_i` with `p` clamped below at `1e-300`.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(shape_err(format!("cross entropy over {} vs {}", p.len(), q.len())));
    }
    Ok(-p
        .iter()
        .zip(q)
        .map(|(pi, qi)| if *qi == 0.0 { 0.0 } else { qi * pi.max(PROB_FLOOR).ln() })
        .sum::<f64>())
}

pub fn entropy(q: &[f64]) -> f64 {
    -q.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// `ℓ_ce(softmax(logits), q)`; adds `scale · (softmax − q)` into `grad_out`.
pub fn softmax_cross_entropy(logits: &[f64], q: &[f64], scale: f64, grad_out: Option<&mut [f64]>) -> Result<f64> {
    let p = softmax(logits, 1.0)?;
    let loss = cross_entropy(&p, q)?;
    if let Some(gr) = grad_out {
        if gr.len() != p.len() {
            return Err(shape_err("softmax cross entropy gradient length"));
        }
        // softmax gradient assumes q sums to one
        let qs: f64 = q.iter().sum();
        for ((o, pi), qi) in gr.iter_mut().zip(&p).zip(q) {
            *o += scale * (qs * pi - qi);
        }
    }
    Ok(loss)
}

/// View rectangle in the source image's unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub scale: f64,
}

impl CropSpec {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let ok = 0.0 <= x0 && x0 < x1 && x1 <= 1.0 && 0.0 <= y0 && y0 < y1 && y1 <= 1.0;
        if !ok {
            return Err(LabError::InvariantViolation(format!(
                "crop [{x0},{x1}]x[{y0},{y1}] outside the unit square"
            )));
        }
        Ok(Self {
            x0,
            y0,
            x1,
            y1,
            scale: (x1 - x0) * (y1 - y0),
        })
    }

    pub fn full() -> Self {
        Self::new(0.0, 0.0, 1.0, 1.0).expect("unit square")
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn intersect(&self, other: &CropSpec) -> Option<CropSpec> {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = self.x1.min(other.x1);
        let y1 = self.y1.min(other.y1);
        (x1 > x0 && y1 > y0).then_some(CropSpec {
            x0,
            y0,
            x1,
            y1,
            scale: (x1 - x0) * (y1 - y0),
        })
    }
}

/// Sparse bilinear resampling operator from an `in_h×in_w` grid to `out_h×out_w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Resampler {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    taps: Vec<[(usize, f64); 4]>,
}

fn axis_taps(local: f64, size: usize) -> [(usize, f64); 2] {
    // half-pixel centres: cell c covers [c, c+1) / size
    let g = (local * size as f64 - 0.5).clamp(0.0, (size - 1) as f64);
    let lo = (g.floor() as usize).min(size - 1);
    let hi = (lo + 1).min(size - 1);
    let t = g - lo as f64;
    [(lo, 1.0 - t), (hi, t)]
}

impl Resampler {
    /// Samples `region` (source coordinates) out of a grid that spans `crop`.
    pub fn new(crop: &CropSpec, region: &CropSpec, in_hw: (usize, usize), out_hw: (usize, usize)) -> Result<Self> {
        let (in_h, in_w) = in_hw;
        let (out_h, out_w) = out_hw;
        if in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0 {
            return Err(shape_err("empty resampling grid"));
        }
        let mut taps = Vec::with_capacity(out_h * out_w);
        for r in 0..out_h {
            let y = region.y0 + (r as f64 + 0.5) / out_h as f64 * (region.y1 - region.y0);
            let ty = axis_taps((y - crop.y0) / (crop.y1 - crop.y0), in_h);
            for c in 0..out_w {
                let x = region.x0 + (c as f64 + 0.5) / out_w as f64 * (region.x1 - region.x0);
                let tx = axis_taps((x - crop.x0) / (crop.x1 - crop.x0), in_w);
                let mut t = [(0usize, 0.0); 4];
                for (k, ((ry, wy), (cx, wx))) in ty.iter().flat_map(|a| tx.iter().map(move |b| (*a, *b))).enumerate() {
                    t[k] = (ry * in_w + cx, wy * wx);
                }
                taps.push(t);
            }
        }
        Ok(Self {
            in_h,
            in_w,
            out_h,
            out_w,
            taps,
        })
    }

    /// Resamples without renormalising.
    pub fn apply(&self, grid: &FeatureGrid) -> Result<FeatureGrid> {
        if grid.height() != self.in_h || grid.width() != self.in_w {
            return Err(shape_err("resampler input shape"));
        }
        let d = grid.dim();
        let mut out = vec![0.0; self.taps.len() * d];
        for (o, taps) in out.chunks_exact_mut(d).zip(&self.taps) {
            for &(src, w) in taps {
                if w != 0.0 {
                    for (v, s) in o.iter_mut().zip(grid.patch(src)) {
                        *v += w * s;
                    }
                }
            }
        }
        FeatureGrid::new(self.out_h, self.out_w, d, out)
    }

    /// Adds `Wᵀ grad_out` into `grad_in`.
    pub fn backward(&self, grad_out: &[f64], dim: usize, grad_in: &mut [f64]) {
        for (g, taps) in grad_out.chunks_exact(dim).zip(&self.taps) {
            for &(src, w) in taps {
                if w != 0.0 {
                    for (gi, go) in grad_in[src * dim..(src + 1) * dim].iter_mut().zip(g) {
                        *gi += w * go;
                    }
                }
            }
        }
    }
}

/// Result of RoI extraction, retaining what is needed for backpropagation.
#[derive(Debug, Clone)]
pub struct Overlap {
    pub a: FeatureGrid,
    pub b: FeatureGrid,
    pub sampler_a: Resampler,
    pub sampler_b: Resampler,
    /// Pre-normalisation row norms of `a` and `b`.
    pub norms_a: Vec<f64>,
    pub norms_b: Vec<f64>,
}

impl Overlap {
    /// Maps a gradient w.r.t. the normalised output `a` back onto the source grid of view a.
    pub fn backward_a(&self, grad: &[f64], grad_in: &mut [f64]) {
        backward_through(&self.a, &self.norms_a, &self.sampler_a, grad, grad_in)
    }

    pub fn backward_b(&self, grad: &[f64], grad_in: &mut [f64]) {
        backward_through(&self.b, &self.norms_b, &self.sampler_b, grad, grad_in)
    }
}

fn backward_through(y: &FeatureGrid, norms: &[f64], s: &Resampler, grad: &[f64], grad_in: &mut [f64]) {
    let d = y.dim();
    let mut raw = Vec::with_capacity(grad.len());
    for (i, g) in grad.chunks_exact(d).enumerate() {
        raw.extend(normalize_backward(y.patch(i), norms[i], g));
    }
    s.backward(&raw, d, grad_in);
}

fn renormalize(mut g: FeatureGrid) -> Result<(FeatureGrid, Vec<f64>)> {
    let mut norms = Vec::with_capacity(g.num_patches());
    for i in 0..g.num_patches() {
        match l2_normalize(g.patch_mut(i)) {
            Some(n) => norms.push(n),
            None => return Err(LabError::DegenerateRow(i)),
        }
    }
    Ok((g.assume_normalized()?, norms))
}

/// Full RoI extraction returning the backward context.
pub fn extract_overlap_with_grad(
    fa: &FeatureGrid,
    ca: &CropSpec,
    fb: &FeatureGrid,
    cb: &CropSpec,
    out_hw: (usize, usize),
) -> Result<Overlap> {
    if fa.dim() != fb.dim() {
        return Err(shape_err("overlap grids differ in feature dim"));
    }
    let region = ca.intersect(cb).ok_or(LabError::NoOverlap)?;
    let sampler_a = Resampler::new(ca, &region, (fa.height(), fa.width()), out_hw)?;
    let sampler_b = Resampler::new(cb, &region, (fb.height(), fb.width()), out_hw)?;
    let (a, norms_a) = renormalize(sampler_a.apply(fa)?)?;
    let (b, norms_b) = renormalize(sampler_b.apply(fb)?)?;
    Ok(Overlap {
        a,
        b,
        sampler_a,
        sampler_b,
        norms_a,
        norms_b,
    })
}

/// Bilinear RoI extraction of the shared region of two views, rows renormalised.
pub fn extract_overlap(
    fa: &FeatureGrid,
    ca: &CropSpec,
    fb: &FeatureGrid,
    cb: &CropSpec,
    out_hw: (usize, usize),
) -> Result<(FeatureGrid, FeatureGrid)> {
    let o = extract_overlap_with_grad(fa, ca, fb, cb, out_hw)?;
    Ok((o.a, o.b))
}

/// `(1/HW) Σ_i ℓ_ce(softmax(online_i), SK(target)_i)`; target is constant.
pub fn patch_align_loss(
    online: &FeatureGrid,
    target: &FeatureGrid,
    sk_cfg: &SinkhornConfig,
    grad_out: Option<&mut [f64]>,
) -> Result<f64> {
    if !online.same_shape(target) {
        return Err(shape_err("online and target grids differ in shape"));
    }
    let q = sinkhorn_normalize(&target.to_matrix(), sk_cfg)?;
    patch_align_to_targets(online, &q, grad_out)
}

/// Patch alignment against precomputed target distributions (one row per patch).
pub fn patch_align_to_targets(online: &FeatureGrid, q: &Matrix, mut grad_out: Option<&mut [f64]>) -> Result<f64> {
    let (n, d) = (online.num_patches(), online.dim());
    if q.rows() != n || q.cols() != d {
        return Err(shape_err("target distribution shape"));
    }
    if let Some(gr) = grad_out.as_deref() {
        if gr.len() != n * d {
            return Err(shape_err("patch align gradient length"));
        }
    }
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    for i in 0..n {
        let g = grad_out.as_deref_mut().map(|gr| &mut gr[i * d..(i + 1) * d]);
        loss += softmax_cross_entropy(online.patch(i), q.row(i), scale, g)?;
    }
    Ok(loss * scale)
}

/// Image-level alignment: the single-patch case of [`patch_align_loss`].
pub fn image_align_loss(
    online_cls: &[f64],
    target_cls: &[f64],
    sk_cfg: &SinkhornConfig,
    grad_out: Option<&mut [f64]>,
) -> Result<f64> {
    if online_cls.len() != target_cls.len() {
        return Err(shape_err("cls dims differ"));
    }
    let q = sinkhorn_normalize(&Matrix::new(1, target_cls.len(), target_cls.to_vec())?, sk_cfg)?;
    softmax_cross_entropy(online_cls, q.row(0), 1.0, grad_out)
}

/// Image-level concentration loss against a nearest neighbour's target embedding.
pub fn image_sc_loss(
    anchor_online_cls: &[f64],
    neighbor_target_cls: &[f64],
    sk_cfg: &SinkhornConfig,
    grad_out: Option<&mut [f64]>,
) -> Result<f64> {
    image_align_loss(anchor_online_cls, neighbor_target_cls, sk_cfg, grad_out)
}

/// Fixed `k` nearest neighbours per sample, self excluded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnnTable {
    pub k: usize,
    pub neighbors: Vec<Vec<usize>>,
}

impl KnnTable {
    /// Cosine brute force over embedding rows; ties go to the lower index.
    pub fn build(embeddings: &Matrix, k: usize) -> Result<Self> {
        let n = embeddings.rows();
        if k == 0 || k >= n {
            return Err(LabError::ConfigError(format!("k={k} needs 1 <= k < {n}")));
        }
        let norms: Vec<f64> = embeddings.row_iter().map(norm).collect();
        if let Some(i) = norms.iter().position(|v| *v == 0.0) {
            return Err(LabError::DegenerateRow(i));
        }
        let neighbors = crate::par::map_indexed(n, |i| {
            let mut sims: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (dot(embeddings.row(i), embeddings.row(j)) / (norms[i] * norms[j]), j))
                .collect();
            sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            sims.into_iter().take(k).map(|(_, j)| j).collect()
        });
        Ok(Self { k, neighbors })
    }

    pub fn validate(&self) -> Result<()> {
        for (i, nb) in self.neighbors.iter().enumerate() {
            if nb.len() != self.k || nb.contains(&i) {
                return Err(LabError::InvariantViolation(format!("neighbour list {i} is malformed")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(s)?;
        t.validate()?;
        Ok(t)
    }
}

/// Uniform draw from `idx`'s neighbour list.
pub fn sample_knn_positive(idx: usize, table: &KnnTable, rng: &mut RngState) -> Result<usize> {
    let nb = table
        .neighbors
        .get(idx)
        .filter(|v| !v.is_empty())
        .ok_or(LabError::UnknownSample(idx))?;
    Ok(nb[rng.below(nb.len())])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_gradient, gradient_report};

    fn one_hot_grid(h: usize, w: usize) -> FeatureGrid {
        let n = h * w;
        let data = (0..n).flat_map(|i| (0..n).map(move |j| f64::from(i == j))).collect();
        FeatureGrid::new(h, w, n, data).unwrap()
    }

    #[test]
    fn cross_entropy_values() {
        assert_eq!(cross_entropy(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        let u = [0.25; 4];
        assert!((cross_entropy(&u, &[0.1, 0.2, 0.3, 0.4]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!((cross_entropy(&[0.7, 0.3], &[1.0, 0.0]).unwrap() - 0.356_674_943_938_732_4).abs() < 1e-15);
        assert!(cross_entropy(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn identity_overlap() {
        let mut rng = RngState::new(4);
        let g = FeatureGrid::new(3, 4, 5, rng.normal_vec(60, 1.0))
            .unwrap()
            .normalized()
            .unwrap();
        let c = CropSpec::new(0.1, 0.2, 0.7, 0.9).unwrap();
        let (a, b) = extract_overlap(&g, &c, &g, &c, (3, 4)).unwrap();
        for (x, y) in a.data().iter().zip(g.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(a, b);
    }

    #[test]
    fn constant_grid_stays_constant() {
        let g = FeatureGrid::new(4, 4, 2, [0.6, 0.8].repeat(16)).unwrap();
        let ca = CropSpec::new(0.0, 0.0, 0.8, 0.7).unwrap();
        let cb = CropSpec::new(0.3, 0.1, 1.0, 1.0).unwrap();
        let (a, b) = extract_overlap(&g, &ca, &g, &cb, (3, 2)).unwrap();
        for p in a.data().chunks(2).chain(b.data().chunks(2)) {
            assert!((p[0] - 0.6).abs() < 1e-12 && (p[1] - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn half_overlap_aligns_left_of_a_with_right_of_b() {
        let g = one_hot_grid(4, 4);
        let ca = CropSpec::new(0.25, 0.0, 0.75, 1.0).unwrap();
        let cb = CropSpec::new(0.0, 0.0, 0.5, 1.0).unwrap();
        let (a, b) = extract_overlap(&g, &ca, &g, &cb, (2, 2)).unwrap();
        // output (r, c) averages source rows 2r, 2r+1; a reads columns c, b reads columns c+2
        let h = std::f64::consts::FRAC_1_SQRT_2;
        for r in 0..2 {
            for c in 0..2 {
                let (pa, pb) = (a.at(r, c), b.at(r, c));
                for src_row in [2 * r, 2 * r + 1] {
                    assert!((pa[src_row * 4 + c] - h).abs() < 1e-12);
                    assert!((pb[src_row * 4 + c + 2] - h).abs() < 1e-12);
                }
            }
        }
        let far = CropSpec::new(0.8, 0.0, 1.0, 1.0).unwrap();
        assert!(matches!(
            extract_overlap(&g, &cb, &g, &far, (2, 2)),
            Err(LabError::NoOverlap)
        ));
    }

    #[test]
    fn overlap_backward_matches_finite_differences() {
        let mut rng = RngState::new(9);
        let src = rng.normal_vec(3 * 3 * 2, 1.0);
        let ca = CropSpec::new(0.0, 0.1, 0.8, 0.9).unwrap();
        let cb = CropSpec::new(0.2, 0.0, 1.0, 1.0).unwrap();
        let other = FeatureGrid::new(3, 3, 2, rng.normal_vec(18, 1.0)).unwrap();
        let weights = rng.normal_vec(2 * 2 * 2, 1.0);
        let f = |x: &[f64]| {
            let g = FeatureGrid::new(3, 3, 2, x.to_vec()).unwrap();
            let (a, _) = extract_overlap(&g, &ca, &other, &cb, (2, 2)).unwrap();
            dot(a.data(), &weights)
        };
        let g = FeatureGrid::new(3, 3, 2, src.clone()).unwrap();
        let o = extract_overlap_with_grad(&g, &ca, &other, &cb, (2, 2)).unwrap();
        let mut analytic = vec![0.0; 18];
        o.backward_a(&weights, &mut analytic);
        let num = finite_diff_gradient(f, &src, 1e-6).unwrap();
        assert!(gradient_report(&analytic, &num).unwrap() < 1e-5);
    }

    #[test]
    fn align_loss_stationary_at_target() {
        let mut rng = RngState::new(5);
        let cfg = SinkhornConfig::default();
        let t = FeatureGrid::new(2, 2, 4, rng.normal_vec(16, 0.1)).unwrap();
        let q = sinkhorn_normalize(&t.to_matrix(), &cfg).unwrap();
        let logits: Vec<f64> = q.data().iter().map(|v| v.ln()).collect();
        let online = FeatureGrid::new(2, 2, 4, logits).unwrap();
        let mut gr = vec![0.0; 16];
        let loss = patch_align_loss(&online, &t, &cfg, Some(&mut gr)).unwrap();
        let mean_h = q.row_iter().map(entropy).sum::<f64>() / 4.0;
        assert!((loss - mean_h).abs() < 1e-12);
        assert!(gr.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn single_patch_reduces_to_cross_entropy() {
        let cfg = SinkhornConfig::default();
        let o = FeatureGrid::new(1, 1, 3, vec![0.2, -0.1, 0.5]).unwrap();
        let t = FeatureGrid::new(1, 1, 3, vec![0.1, 0.0, 0.03]).unwrap();
        let l = patch_align_loss(&o, &t, &cfg, None).unwrap();
        let q = softmax(t.data(), cfg.temperature).unwrap();
        let p = softmax(o.data(), 1.0).unwrap();
        assert!((l - cross_entropy(&p, &q).unwrap()).abs() < 1e-15);
        assert_eq!(l, image_align_loss(o.data(), t.data(), &cfg, None).unwrap());
    }

    #[test]
    fn patch_align_gradient() {
        let mut rng = RngState::new(6);
        let cfg = SinkhornConfig::default();
        let t = FeatureGrid::new(2, 2, 4, rng.normal_vec(16, 1.0)).unwrap();
        let x = rng.normal_vec(16, 1.0);
        let online = FeatureGrid::new(2, 2, 4, x.clone()).unwrap();
        let mut gr = vec![0.0; 16];
        patch_align_loss(&online, &t, &cfg, Some(&mut gr)).unwrap();
        let num = finite_diff_gradient(
            |v| {
                let o = FeatureGrid::new(2, 2, 4, v.to_vec()).unwrap();
                patch_align_loss(&o, &t, &cfg, None).unwrap()
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(gradient_report(&gr, &num).unwrap() < 1e-5);
    }

    #[test]
    fn knn_table_and_sampling() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0], vec![0.1, 0.9]]).unwrap();
        let t = KnnTable::build(&m, 1).unwrap();
        assert_eq!(t.neighbors, vec![vec![1], vec![0], vec![3], vec![2]]);
        let back = KnnTable::from_json(&t.to_json().unwrap()).unwrap();
        assert_eq!(back, t);
        let mut rng = RngState::new(0);
        assert_eq!(sample_knn_positive(2, &t, &mut rng).unwrap(), 3);
        assert!(matches!(
            sample_knn_positive(9, &t, &mut rng),
            Err(LabError::UnknownSample(9))
        ));
        let bad = r#"{"k":1,"neighbors":[[0]]}"#;
        assert!(KnnTable::from_json(bad).is_err());
    }
}
