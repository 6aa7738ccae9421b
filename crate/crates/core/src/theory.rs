//! Numerical harness for the embedding theory: the constrained SSL objective,
//! its penalty/projection solver, the classification margin, the similarity
//! trade-off slack and the downstream error bound.
//!
//! Embedding matrices hold one sample per row (`N×d`), each of norm `r`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, LabError, Result};
use crate::eval::{class_centroids, error_rate};
use crate::numeric::{dot, Matrix, RngState};

pub type EmbeddingMatrix = Matrix;

/// Generation parameters for a labelled embedding problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstanceSpec {
    pub k: usize,
    /// Source images per class.
    pub n: usize,
    /// Views per source image.
    pub m: usize,
    pub d: usize,
    pub r: f64,
    pub alpha: f64,
    pub phi_f: f64,
    pub input_dim: usize,
    /// Distance scale between class centres in input space.
    pub class_sep: f64,
    /// Spread of source images around their class centre.
    pub image_spread: f64,
    /// Spread of views around their source image.
    pub view_spread: f64,
}

impl Default for InstanceSpec {
    fn default() -> Self {
        Self {
            k: 2,
            n: 4,
            m: 2,
            d: 2,
            r: 1.0,
            alpha: 0.25,
            phi_f: 1.0,
            input_dim: 8,
            class_sep: 3.0,
            image_spread: 0.3,
            view_spread: 0.1,
        }
    }
}

/// A generated problem with inputs, labels and the derived index sets.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryInstance {
    pub spec: InstanceSpec,
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub source: Vec<usize>,
    /// Lower bound on `z_iᵀz_j` implied by the Lipschitz constant.
    pub bounds: Matrix,
}

impl TheoryInstance {
    pub fn generate(spec: &InstanceSpec, rng: &mut RngState) -> Result<Self> {
        if spec.k < 2 || spec.n == 0 || spec.m == 0 || spec.d == 0 || spec.input_dim < spec.k {
            return Err(LabError::ConfigError(format!("invalid theory instance {spec:?}")));
        }
        if !(spec.r > 0.0) || !(spec.alpha > 0.0) || !(spec.phi_f > 0.0) {
            return Err(LabError::ConfigError("r, alpha and phi_f must be positive".into()));
        }
        let dim = spec.input_dim;
        let scale = 1.0 / (dim as f64).sqrt();
        let mut x = Vec::new();
        let mut labels = Vec::new();
        let mut source = Vec::new();
        for k in 0..spec.k {
            for a in 0..spec.n {
                let mut img: Vec<f64> = (0..dim).map(|c| if c == k { spec.class_sep } else { 0.0 }).collect();
                for v in img.iter_mut() {
                    *v += spec.image_spread * scale * rng.normal();
                }
                for _ in 0..spec.m {
                    x.extend(img.iter().map(|v| v + spec.view_spread * scale * rng.normal()));
                    labels.push(k);
                    source.push(k * spec.n + a);
                }
            }
        }
        let x = Matrix::new(labels.len(), dim, x)?;
        Self::from_parts(spec.clone(), x, labels, source)
    }

    pub fn from_parts(spec: InstanceSpec, x: Matrix, labels: Vec<usize>, source: Vec<usize>) -> Result<Self> {
        let n = x.rows();
        if labels.len() != n || source.len() != n {
            return Err(shape_err("labels and sources must match input rows"));
        }
        let r2 = spec.r * spec.r;
        let bounds = Matrix::from_fn(n, n, |i, j| {
            let dist2: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist2 == 0.0 {
                r2
            } else {
                r2 - spec.phi_f * spec.phi_f * dist2 / 2.0
            }
        });
        Ok(Self {
            spec,
            x,
            labels,
            source,
            bounds,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn w_hat(&self, i: usize, j: usize) -> bool {
        self.source[i] == self.source[j]
    }

    /// Same label, different source.
    pub fn t1(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&j| self.labels[j] == self.labels[i] && self.source[j] != self.source[i])
    }

    /// Same source, including `i`.
    pub fn t2(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&j| self.source[j] == self.source[i])
    }

    pub fn class_members(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&j| self.labels[j] == k)
    }

    /// Source images per class when balanced.
    pub fn n_per_class(&self) -> usize {
        self.spec.n
    }
}

fn check_shape(z: &EmbeddingMatrix, inst: &TheoryInstance) -> Result<()> {
    if z.rows() != inst.len() || z.cols() != inst.spec.d {
        return Err(shape_err(format!(
            "embedding {}x{} for N={}, d={}",
            z.rows(),
            z.cols(),
            inst.len(),
            inst.spec.d
        )));
    }
    Ok(())
}

fn check_radius(z: &EmbeddingMatrix, r: f64) -> Result<()> {
    for (i, row) in z.row_iter().enumerate() {
        let n = dot(row, row).sqrt();
        if (n - r).abs() > 1e-6 {
            return Err(LabError::InvariantViolation(format!(
                "z_{i} has norm {n}, expected {r}"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SslObjective {
    pub align: f64,
    pub div: f64,
    pub total: f64,
}

fn correlation(z: &EmbeddingMatrix) -> Matrix {
    let n = z.rows() as f64;
    let mut c = z.transpose().matmul(z).expect("square product");
    c.scale(1.0 / n);
    c
}

fn objective_unchecked(z: &EmbeddingMatrix, inst: &TheoryInstance) -> SslObjective {
    let n = z.rows();
    let d = z.cols();
    let r2 = inst.spec.r * inst.spec.r;
    // per source group: Σ_{i,j∈G} ‖z_i − z_j‖² = 2|G| Σ_i ‖z_i − μ_G‖²
    let mut groups: std::collections::BTreeMap<usize, (Vec<f64>, usize)> = Default::default();
    for (i, row) in z.row_iter().enumerate() {
        let e = groups.entry(inst.source[i]).or_insert_with(|| (vec![0.0; d], 0));
        e.0.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        e.1 += 1;
    }
    let mut pair_sum = 0.0;
    for (i, row) in z.row_iter().enumerate() {
        let (s, c) = &groups[&inst.source[i]];
        let c = *c as f64;
        pair_sum += 2.0 * c * row.iter().zip(s).map(|(a, b)| (a - b / c).powi(2)).sum::<f64>();
    }
    let align = pair_sum / (2.0 * (n * n) as f64);
    let c = correlation(z);
    let mut fro = 0.0;
    for a in 0..d {
        for b in 0..d {
            let t = c.get(a, b) - if a == b { r2 / d as f64 } else { 0.0 };
            fro += t * t;
        }
    }
    let div = 0.5 * fro;
    SslObjective {
        align,
        div,
        total: align + inst.spec.alpha * div,
    }
}

/// `L_align`, `L_div` and `L_SSL = L_align + α L_div`.
pub fn ssl_objective(z: &EmbeddingMatrix, inst: &TheoryInstance) -> Result<SslObjective> {
    check_shape(z, inst)?;
    check_radius(z, inst.spec.r)?;
    Ok(objective_unchecked(z, inst))
}

/// Gradient of `L_SSL` w.r.t. every row of `z`.
fn objective_grad(z: &EmbeddingMatrix, inst: &TheoryInstance) -> Matrix {
    let n = z.rows();
    let d = z.cols();
    let r2 = inst.spec.r * inst.spec.r;
    let mut c = correlation(z);
    for a in 0..d {
        c.set(a, a, c.get(a, a) - r2 / d as f64);
    }
    let mut sums: std::collections::BTreeMap<usize, (Vec<f64>, usize)> = Default::default();
    for (i, row) in z.row_iter().enumerate() {
        let e = sums.entry(inst.source[i]).or_insert_with(|| (vec![0.0; d], 0));
        e.0.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        e.1 += 1;
    }
    let ka = 2.0 / (n * n) as f64;
    let kd = inst.spec.alpha * 2.0 / n as f64;
    Matrix::from_fn(n, d, |i, a| {
        let (s, cnt) = &sums[&inst.source[i]];
        let zi = z.row(i);
        let align = ka * (*cnt as f64 * zi[a] - s[a]);
        let div = kd * dot(c.row(a), zi);
        align + div
    })
}

/// `max_{i≠j} [b_ij − z_iᵀz_j]₊`; the diagonal holds by the norm constraint.
pub fn constraint_violation(z: &EmbeddingMatrix, inst: &TheoryInstance) -> Result<f64> {
    check_shape(z, inst)?;
    Ok(violation_unchecked(z, inst))
}

fn violation_unchecked(z: &EmbeddingMatrix, inst: &TheoryInstance) -> f64 {
    let n = z.rows();
    let rows = crate::par::map_indexed(n, |i| {
        let mut worst: f64 = 0.0;
        for j in (0..n).filter(|&j| j != i) {
            worst = worst.max(inst.bounds.get(i, j) - dot(z.row(i), z.row(j)));
        }
        worst
    });
    rows.into_iter().fold(0.0, f64::max)
}

fn penalty_and_grad(z: &EmbeddingMatrix, inst: &TheoryInstance, rho: f64, grad: Option<&mut Matrix>) -> f64 {
    if rho == 0.0 {
        return 0.0;
    }
    let n = z.rows();
    let d = z.cols();
    let rows = crate::par::map_indexed(n, |i| {
        let mut p = 0.0;
        let mut g = vec![0.0; d];
        for j in 0..n {
            if j == i {
                continue;
            }
            let v = inst.bounds.get(i, j) - dot(z.row(i), z.row(j));
            if v > 0.0 {
                p += v * v;
                // symmetric pair counted from both ends
                for (o, x) in g.iter_mut().zip(z.row(j)) {
                    *o -= 2.0 * rho * v * x;
                }
            }
        }
        (p, g)
    });
    let mut total = 0.0;
    let mut gm = grad;
    for (i, (p, g)) in rows.into_iter().enumerate() {
        total += p;
        if let Some(gm) = gm.as_deref_mut() {
            gm.row_mut(i).iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
    }
    0.5 * rho * total
}

/// Solver settings for the penalised projected descent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    /// Increasing penalty weights, one descent stage each.
    pub penalties: Vec<f64>,
    pub steps_per_stage: usize,
    pub restarts: usize,
    pub initial_step: f64,
    /// Stop a stage once the relative decrease per step falls below this.
    pub rel_tol: f64,
    pub feasibility_gate: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            penalties: vec![1e1, 1e2, 1e3, 1e4, 1e5, 1e6, 1e7, 1e8],
            steps_per_stage: 2000,
            restarts: 3,
            initial_step: 1.0,
            rel_tol: 1e-15,
            feasibility_gate: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub z: EmbeddingMatrix,
    pub objective: SslObjective,
    pub violation: f64,
    /// Penalised objective at every accepted iterate, per stage.
    pub trace: Vec<Vec<f64>>,
}

fn project_rows(z: &mut Matrix, r: f64) {
    for i in 0..z.rows() {
        let row = z.row_mut(i);
        let n = dot(row, row).sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v *= r / n);
        } else {
            row[0] = r;
        }
    }
}

fn random_start(inst: &TheoryInstance, rng: &mut RngState) -> Matrix {
    let mut z = Matrix::new(inst.len(), inst.spec.d, rng.normal_vec(inst.len() * inst.spec.d, 1.0)).expect("shape");
    project_rows(&mut z, inst.spec.r);
    z
}

fn descend(inst: &TheoryInstance, z0: Matrix, cfg: &OptimConfig) -> (Matrix, Vec<Vec<f64>>) {
    let r = inst.spec.r;
    let r2 = r * r;
    let mut z = z0;
    let mut trace = Vec::with_capacity(cfg.penalties.len().max(1));
    let stages: Vec<f64> = if cfg.penalties.is_empty() {
        vec![0.0]
    } else {
        cfg.penalties.clone()
    };
    let mut step = cfg.initial_step;
    for &rho in &stages {
        let f_of = |z: &Matrix| objective_unchecked(z, inst).total + penalty_and_grad(z, inst, rho, None);
        let mut f = f_of(&z);
        let mut stage = vec![f];
        for _ in 0..cfg.steps_per_stage {
            let mut g = objective_grad(&z, inst);
            penalty_and_grad(&z, inst, rho, Some(&mut g));
            // tangent projection on each sphere
            for i in 0..z.rows() {
                let zi = z.row(i).to_vec();
                let s = dot(g.row(i), &zi) / r2;
                g.row_mut(i).iter_mut().zip(&zi).for_each(|(a, b)| *a -= s * b);
            }
            let gnorm2: f64 = g.data().iter().map(|v| v * v).sum();
            if gnorm2 == 0.0 {
                break;
            }
            let mut accepted = false;
            while step > 1e-18 {
                let mut cand = z.clone();
                cand.data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a -= step * b);
                project_rows(&mut cand, r);
                let fc = f_of(&cand);
                if fc <= f - 1e-4 * step * gnorm2 || (fc < f && step < 1e-12) {
                    let rel = (f - fc) / f.abs().max(f64::MIN_POSITIVE);
                    z = cand;
                    f = fc;
                    stage.push(f);
                    step *= 2.0;
                    accepted = rel > cfg.rel_tol;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        trace.push(stage);
        step = step.max(cfg.initial_step / (rho.max(1.0)));
    }
    (z, trace)
}

/// Penalty + projection descent on the constrained objective with random
/// restarts. Returns the feasible iterate of lowest `L_SSL`.
pub fn optimize_op1(inst: &TheoryInstance, cfg: &OptimConfig, rng: &mut RngState) -> Result<OptimResult> {
    let mut best: Option<OptimResult> = None;
    let mut least_violation = f64::INFINITY;
    for _ in 0..cfg.restarts.max(1) {
        let z0 = random_start(inst, rng);
        let (z, trace) = descend(inst, z0, cfg);
        let violation = violation_unchecked(&z, inst);
        least_violation = least_violation.min(violation);
        if violation > cfg.feasibility_gate {
            continue;
        }
        let objective = objective_unchecked(&z, inst);
        if best.as_ref().is_none_or(|b| objective.total < b.objective.total) {
            best = Some(OptimResult {
                z,
                objective,
                violation,
                trace,
            });
        }
    }
    best.ok_or(LabError::InfeasibleResult {
        violation: least_violation,
    })
}

fn mean_cross(z: &EmbeddingMatrix, a: &[usize], b: &[usize]) -> f64 {
    let mut s = 0.0;
    for &j in a {
        for &l in b {
            s += dot(z.row(j), z.row(l));
        }
    }
    s / (a.len() * b.len()) as f64
}

/// Per-class margins; entry `y(x_i)` is `+∞`. A positive margin for every other
/// class is the sufficient condition for correct nearest-centroid classification.
pub fn lemma1_margin(z: &EmbeddingMatrix, inst: &TheoryInstance, i: usize) -> Result<Vec<f64>> {
    check_shape(z, inst)?;
    let r = inst.spec.r;
    let t2: Vec<usize> = inst.t2(i).collect();
    let y = inst.labels[i];
    let own: Vec<usize> = inst.class_members(y).collect();
    let d = z.cols();
    let mut mean = vec![0.0; d];
    for &j in &t2 {
        mean.iter_mut()
            .zip(z.row(j))
            .for_each(|(a, b)| *a += b / t2.len() as f64);
    }
    let dist = z
        .row(i)
        .iter()
        .zip(&mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let intra = mean_cross(z, &t2, &own);
    let k_max = inst.labels.iter().copied().max().unwrap_or(0) + 1;
    Ok((0..k_max)
        .map(|k| {
            if k == y {
                return f64::INFINITY;
            }
            let other: Vec<usize> = inst.class_members(k).collect();
            if other.is_empty() {
                return f64::INFINITY;
            }
            intra - mean_cross(z, &t2, &other) - 4.0 * r * dist
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Lemma2Terms {
    pub delta1: f64,
    pub delta2: f64,
    /// `Δ^{(i,k)}` per class; zero at `y(x_i)`.
    pub delta_k: Vec<f64>,
    pub slack: f64,
}

/// The three similarity trade-off sums and
/// `slack = Δ₁ + Δ₂ + Σ_k Δ^{(i,k)} − (1 − 1/d) N r⁴`.
pub fn lemma2_slack(z: &EmbeddingMatrix, inst: &TheoryInstance, i: usize) -> Result<Lemma2Terms> {
    check_shape(z, inst)?;
    let r2 = inst.spec.r * inst.spec.r;
    let r4 = r2 * r2;
    let c = 1.0 / (4.0 * inst.spec.alpha);
    let zi = z.row(i);
    let delta1: f64 = inst.t1(i).map(|j| r4 - dot(zi, z.row(j)).powi(2)).sum();
    let delta2: f64 = inst
        .t2(i)
        .map(|j| (r2 - c).powi(2) - (dot(zi, z.row(j)) - c).powi(2))
        .sum();
    let y = inst.labels[i];
    let k_max = inst.labels.iter().copied().max().unwrap_or(0) + 1;
    let delta_k: Vec<f64> = (0..k_max)
        .map(|k| {
            if k == y {
                0.0
            } else {
                inst.class_members(k).map(|j| r4 - dot(zi, z.row(j)).powi(2)).sum()
            }
        })
        .collect();
    let n = inst.len() as f64;
    let d = inst.spec.d as f64;
    let slack = delta1 + delta2 + delta_k.iter().sum::<f64>() - (1.0 - 1.0 / d) * n * r4;
    Ok(Lemma2Terms {
        delta1,
        delta2,
        delta_k,
        slack,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationParams {
    pub d_t: f64,
    pub q_t: f64,
    pub delta_t: f64,
    pub p_t: f64,
}

/// `p_T = sup_i P_{j,l∈T₂(i)}[z_jᵀz_l ≤ δ_T]` and
/// `q_T = sup_i P_{j∈T₂(i), l∈T₁(j)}[z_jᵀz_l ≤ d_T]`, pairs with `j = l` included.
pub fn estimate_params(
    z: &EmbeddingMatrix,
    inst: &TheoryInstance,
    d_t: f64,
    delta_t: f64,
) -> Result<ConcentrationParams> {
    check_shape(z, inst)?;
    let mut p_t: f64 = 0.0;
    let mut q_t: f64 = 0.0;
    let mut seen = std::collections::BTreeSet::new();
    for i in 0..inst.len() {
        // both suprema only depend on the source group of i
        if !seen.insert(inst.source[i]) {
            continue;
        }
        let t2: Vec<usize> = inst.t2(i).collect();
        let mut hits = 0usize;
        for &j in &t2 {
            for &l in &t2 {
                if dot(z.row(j), z.row(l)) <= delta_t {
                    hits += 1;
                }
            }
        }
        p_t = p_t.max(hits as f64 / (t2.len() * t2.len()) as f64);
        let (mut qh, mut qn) = (0usize, 0usize);
        for &j in &t2 {
            for l in inst.t1(j) {
                qn += 1;
                if dot(z.row(j), z.row(l)) <= d_t {
                    qh += 1;
                }
            }
        }
        if qn > 0 {
            q_t = q_t.max(qh as f64 / qn as f64);
        }
    }
    Ok(ConcentrationParams { d_t, q_t, delta_t, p_t })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoremBound {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub bound: f64,
    pub preconditions_ok: bool,
    /// Lower limit on `d_T` used for the precondition check.
    pub d_t_threshold: f64,
    /// Alternative closed form of the limit. It always exceeds `r²`, so it is reported but never checked.
    pub d_t_threshold_stated: f64,
}

/// Threshold from the bound's derivation: `(3 + 2√(13K/d + 390/n − 1)) r² / 13`.
pub fn d_t_threshold(k: usize, d: usize, n: f64, r: f64) -> f64 {
    (3.0 + 2.0 * (13.0 * k as f64 / d as f64 + 390.0 / n - 1.0).sqrt()) * r * r / 13.0
}

/// Alternative threshold form: `(3 + 2√(K/d + 30/n − 1/13)) r² / √13`.
pub fn d_t_threshold_stated(k: usize, d: usize, n: f64, r: f64) -> f64 {
    (3.0 + 2.0 * (k as f64 / d as f64 + 30.0 / n - 1.0 / 13.0).sqrt()) * r * r / 13f64.sqrt()
}

/// Constants and error bound for given concentration parameters and problem sizes.
pub fn theorem_bound_for(params: &ConcentrationParams, k: usize, d: usize, n: f64, r: f64) -> TheoremBound {
    let r2 = r * r;
    let r4 = r2 * r2;
    let ConcentrationParams { d_t, q_t, delta_t, p_t } = *params;
    let kf = k as f64;
    let df = d as f64;
    let c1 =
        (2.0 * delta_t + (n - 1.0) * (3.0 * d_t - r2)) / (2.0 * n) - (kf * r4 / df - d_t * d_t + 30.0 * r4 / n).sqrt();
    let c2 = r / n * (5.0 * (delta_t + r2)).sqrt() + (1.0 / n).sqrt() * delta_t;
    let c3 = (n - 1.0) / n * 6f64.sqrt() * r2 + ((n - 1.0) / n).sqrt() * d_t;
    let denom = c1 - c2 * p_t.sqrt() - c3 * q_t.sqrt();
    let threshold = d_t_threshold(k, d, n, r);
    let preconditions_ok = 2 * d >= k
        && d <= k
        && delta_t >= d_t
        && d_t >= threshold
        && d_t <= r2
        && delta_t <= r2
        && c1.is_finite()
        && denom > 0.0;
    let bound = if preconditions_ok {
        32.0 * r2 * (r2 - delta_t + r * (5.0 * p_t * (delta_t + r2)).sqrt()) / (denom * denom)
    } else {
        f64::INFINITY
    };
    TheoremBound {
        c1,
        c2,
        c3,
        bound,
        preconditions_ok,
        d_t_threshold: threshold,
        d_t_threshold_stated: d_t_threshold_stated(k, d, n, r),
    }
}

pub fn theorem_bound(params: &ConcentrationParams, inst: &TheoryInstance) -> TheoremBound {
    theorem_bound_for(params, inst.spec.k, inst.spec.d, inst.n_per_class() as f64, inst.spec.r)
}

/// Nearest-centroid error of the embedding against the true labels.
pub fn embedding_error(z: &EmbeddingMatrix, inst: &TheoryInstance) -> Result<f64> {
    let c = class_centroids(z, &inst.labels, inst.spec.k)?;
    error_rate(z, &inst.labels, &c)
}

/// One CSV row of a theory sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub instance_id: usize,
    pub n_samples: usize,
    pub k: usize,
    pub d: usize,
    pub alpha: f64,
    pub phi_f: f64,
    pub d_t: f64,
    pub q_t: f64,
    pub delta_t: f64,
    pub p_t: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub bound: f64,
    pub err: f64,
    pub ok: bool,
}

pub const SWEEP_HEADER: &str = "instance_id,N,K,d,alpha,phi_f,d_T,q_T,delta_T,p_T,C1,C2,C3,bound,err,ok";

/// 17 significant digits, `inf`/`nan` spelled out.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v:.16e}")
    }
}

impl SweepRow {
    pub fn to_csv(&self) -> String {
        let f = fmt_f64;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.instance_id,
            self.n_samples,
            self.k,
            self.d,
            f(self.alpha),
            f(self.phi_f),
            f(self.d_t),
            f(self.q_t),
            f(self.delta_t),
            f(self.p_t),
            f(self.c1),
            f(self.c2),
            f(self.c3),
            f(self.bound),
            f(self.err),
            self.ok
        )
    }
}

/// Sweep point: an instance spec plus the `(d_T, δ_T)` pair to evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub spec: InstanceSpec,
    pub d_t: f64,
    pub delta_t: f64,
}

/// Builds, optimises and evaluates every point. Infeasible points yield `ok=false`.
pub fn run_sweep(points: &[SweepPoint], optim: &OptimConfig, seed: u64) -> Result<Vec<SweepRow>> {
    let root = RngState::new(seed);
    let rows = crate::par::map_indexed(points.len(), |id| -> Result<SweepRow> {
        let pt = &points[id];
        let mut rng = root.fork(id as u64);
        let inst = TheoryInstance::generate(&pt.spec, &mut rng)?;
        let base = SweepRow {
            instance_id: id,
            n_samples: inst.len(),
            k: pt.spec.k,
            d: pt.spec.d,
            alpha: pt.spec.alpha,
            phi_f: pt.spec.phi_f,
            d_t: pt.d_t,
            q_t: f64::NAN,
            delta_t: pt.delta_t,
            p_t: f64::NAN,
            c1: f64::NAN,
            c2: f64::NAN,
            c3: f64::NAN,
            bound: f64::NAN,
            err: f64::NAN,
            ok: false,
        };
        let opt = match optimize_op1(&inst, optim, &mut rng) {
            Ok(o) => o,
            Err(LabError::InfeasibleResult { .. }) => return Ok(base),
            Err(e) => return Err(e),
        };
        let params = estimate_params(&opt.z, &inst, pt.d_t, pt.delta_t)?;
        let tb = theorem_bound(&params, &inst);
        let err = embedding_error(&opt.z, &inst)?;
        Ok(SweepRow {
            q_t: params.q_t,
            p_t: params.p_t,
            c1: tb.c1,
            c2: tb.c2,
            c3: tb.c3,
            bound: tb.bound,
            err,
            ok: err <= tb.bound,
            ..base
        })
    });
    rows.into_iter().collect()
}

/// Outcome of randomised checks of the margin condition against nearest-centroid labels.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Lemma1FuzzReport {
    pub instances: usize,
    pub samples: usize,
    /// Samples whose margins were all positive.
    pub covered: usize,
    /// Covered samples that nearest-centroid classification still gets wrong.
    pub counterexamples: usize,
    /// `(instance, sample)` of the first few counterexamples.
    pub examples: Vec<(usize, usize)>,
}

/// Random labelled embedding on the `r`-sphere: class anchors, per-source
/// perturbation and per-view perturbation of random scale. `N ≤ 64`, `d ≤ 16`.
pub fn random_embedding_instance(rng: &mut RngState) -> (TheoryInstance, EmbeddingMatrix) {
    let k = 2 + rng.below(3);
    let n = 1 + rng.below(4);
    let m = 1 + rng.below(4);
    let d = 2 + rng.below(15);
    let r = 0.5 + rng.uniform() * 1.5;
    let spread_img = rng.uniform() * 1.5;
    let spread_view = rng.uniform() * 0.5;
    let spec = InstanceSpec {
        k,
        n,
        m,
        d,
        r,
        alpha: 1.0 / (4.0 * r * r),
        phi_f: f64::INFINITY,
        input_dim: k,
        ..InstanceSpec::default()
    };
    let anchors: Vec<Vec<f64>> = (0..k).map(|_| rng.normal_vec(d, 1.0)).collect();
    let mut z = Vec::new();
    let mut labels = Vec::new();
    let mut source = Vec::new();
    for (c, anchor) in anchors.iter().enumerate() {
        for a in 0..n {
            let img: Vec<f64> = anchor.iter().map(|v| v + spread_img * rng.normal()).collect();
            for _ in 0..m {
                let mut v: Vec<f64> = img.iter().map(|v| v + spread_view * rng.normal()).collect();
                let nv = dot(&v, &v).sqrt().max(f64::MIN_POSITIVE);
                v.iter_mut().for_each(|x| *x *= r / nv);
                z.extend(v);
                labels.push(c);
                source.push(c * n + a);
            }
        }
    }
    let total = labels.len();
    let x = Matrix::from_fn(total, k, |i, c| if c == labels[i] { 1.0 } else { 0.0 });
    let inst = TheoryInstance::from_parts(spec, x, labels, source).expect("consistent parts");
    let z = Matrix::new(total, d, z).expect("shape");
    (inst, z)
}

/// Checks "every margin positive ⇒ nearest-centroid label is correct" on
/// `count` random instances.
pub fn lemma1_fuzz(count: usize, seed: u64) -> Result<Lemma1FuzzReport> {
    let root = RngState::new(seed);
    let per = crate::par::map_indexed(count, |id| -> Result<(usize, usize, Vec<usize>)> {
        let (inst, z) = random_embedding_instance(&mut root.fork(id as u64));
        let cents = class_centroids(&z, &inst.labels, inst.spec.k)?;
        let mut covered = 0;
        let mut bad = Vec::new();
        for i in 0..inst.len() {
            if lemma1_margin(&z, &inst, i)?.iter().all(|&m| m > 0.0) {
                covered += 1;
                if crate::eval::knn_classify(z.row(i), &cents)? != inst.labels[i] {
                    bad.push(i);
                }
            }
        }
        Ok((inst.len(), covered, bad))
    });
    let mut rep = Lemma1FuzzReport {
        instances: count,
        ..Default::default()
    };
    for (id, row) in per.into_iter().enumerate() {
        let (len, covered, bad) = row?;
        rep.samples += len;
        rep.covered += covered;
        rep.counterexamples += bad.len();
        rep.examples.extend(
            bad.into_iter()
                .map(|i| (id, i))
                .take(8usize.saturating_sub(rep.examples.len())),
        );
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TheoryInstance {
        TheoryInstance::generate(&InstanceSpec::default(), &mut RngState::new(1)).unwrap()
    }

    fn collapse(inst: &TheoryInstance) -> Matrix {
        Matrix::from_fn(inst.len(), inst.spec.d, |i, a| {
            if a == inst.labels[i] {
                inst.spec.r
            } else {
                0.0
            }
        })
    }

    #[test]
    fn objective_reference_cases() {
        let inst = small();
        let z = Matrix::from_fn(inst.len(), 2, |_, a| if a == 0 { 1.0 } else { 0.0 });
        assert_eq!(ssl_objective(&z, &inst).unwrap().align, 0.0);
        let z = collapse(&inst);
        let o = ssl_objective(&z, &inst).unwrap();
        assert!(o.align == 0.0 && o.div.abs() < 1e-15);
        let bad = Matrix::from_fn(inst.len(), 2, |_, _| 1.0);
        assert!(matches!(
            ssl_objective(&bad, &inst),
            Err(LabError::InvariantViolation(_))
        ));
    }

    #[test]
    fn objective_matches_double_loop_and_gradient() {
        let inst = small();
        let mut rng = RngState::new(2);
        let z = random_start(&inst, &mut rng);
        let o = ssl_objective(&z, &inst).unwrap();
        let n = inst.len();
        let mut align = 0.0;
        for i in 0..n {
            for j in 0..n {
                if inst.w_hat(i, j) {
                    align += z.row(i).iter().zip(z.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                }
            }
        }
        align /= 2.0 * (n * n) as f64;
        assert!((o.align - align).abs() < 1e-14);

        let g = objective_grad(&z, &inst);
        let num = crate::numeric::finite_diff_gradient(
            |x| objective_unchecked(&Matrix::new(n, 2, x.to_vec()).unwrap(), &inst).total,
            z.data(),
            1e-6,
        )
        .unwrap();
        assert!(crate::numeric::gradient_report(g.data(), &num).unwrap() < 1e-5);
    }

    #[test]
    fn violation_cases() {
        let mut spec = InstanceSpec {
            phi_f: f64::INFINITY,
            ..InstanceSpec::default()
        };
        let inst = TheoryInstance::generate(&spec, &mut RngState::new(0)).unwrap();
        let z = random_start(&inst, &mut RngState::new(1));
        assert_eq!(constraint_violation(&z, &inst).unwrap(), 0.0);

        spec.phi_f = 1.0;
        let x = Matrix::zeros(2, 8);
        let inst = TheoryInstance::from_parts(spec, x, vec![0, 1], vec![0, 1]).unwrap();
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(constraint_violation(&z, &inst).unwrap(), 2.0);
    }

    #[test]
    fn optimizer_descends_and_reaches_collapse() {
        let inst = small();
        let cfg = OptimConfig {
            restarts: 1,
            ..OptimConfig::default()
        };
        let res = optimize_op1(&inst, &cfg, &mut RngState::new(3)).unwrap();
        for stage in &res.trace {
            assert!(stage.windows(2).all(|w| w[1] <= w[0]));
        }
        assert!(res.violation <= 1e-6);
        assert!(res.objective.total < 1e-9, "{:?}", res.objective);
        for i in 0..inst.len() {
            assert!(lemma2_slack(&res.z, &inst, i).unwrap().slack >= -1e-6);
        }
    }

    #[test]
    fn lemma1_on_orthogonal_classes() {
        let inst = small();
        let z = collapse(&inst);
        for i in 0..inst.len() {
            let m = lemma1_margin(&z, &inst, i).unwrap();
            let k = 1 - inst.labels[i];
            assert!((m[k] - 1.0).abs() < 1e-15);
        }
        assert_eq!(embedding_error(&z, &inst).unwrap(), 0.0);
    }

    #[test]
    fn lemma1_wrong_centroid_gives_nonpositive_margin() {
        let inst = small();
        let mut z = collapse(&inst);
        // move sample 0 (class 0) onto class 1's direction, leaving its view partner behind
        z.row_mut(0).copy_from_slice(&[0.0, 1.0]);
        let m = lemma1_margin(&z, &inst, 0).unwrap();
        assert!(m[1] <= 0.0);
    }

    #[test]
    fn lemma2_plug_in_at_view_collapse() {
        // z_iᵀz_j = ŵ_ij r²: one orthogonal direction per source
        let spec = InstanceSpec {
            d: 8,
            ..InstanceSpec::default()
        };
        let inst = TheoryInstance::generate(&spec, &mut RngState::new(4)).unwrap();
        let z = Matrix::from_fn(inst.len(), 8, |i, a| if a == inst.source[i] { 1.0 } else { 0.0 });
        let t = lemma2_slack(&z, &inst, 0).unwrap();
        assert_eq!(t.delta2, 0.0);
        assert_eq!(t.delta1, inst.t1(0).count() as f64);
        assert_eq!(t.delta_k[1], inst.class_members(1).count() as f64);
    }

    #[test]
    fn params_trivial_cases() {
        let inst = small();
        let z = collapse(&inst);
        let p = estimate_params(&z, &inst, 0.5, 0.99).unwrap();
        assert_eq!(p.p_t, 0.0);
        assert_eq!(p.q_t, 0.0);
        let p = estimate_params(&random_start(&inst, &mut RngState::new(0)), &inst, 0.5, -1.0 - 1e-12).unwrap();
        assert_eq!(p.p_t, 0.0);
    }

    #[test]
    fn bound_limits() {
        let ideal = ConcentrationParams {
            d_t: 1.0,
            q_t: 0.0,
            delta_t: 1.0,
            p_t: 0.0,
        };
        let tb = theorem_bound_for(&ideal, 4, 4, 1e12, 1.0);
        assert!(tb.preconditions_ok);
        assert_eq!(tb.bound, 0.0);
        let bad = ConcentrationParams {
            d_t: 0.1,
            q_t: 1.0,
            delta_t: 0.2,
            p_t: 0.0,
        };
        let tb = theorem_bound_for(&bad, 4, 4, 100.0, 1.0);
        assert!(!tb.preconditions_ok && tb.bound.is_infinite());
        // the stated threshold exceeds r² for every admissible K, d, n
        for (k, d) in [(2, 1), (2, 2), (8, 4), (8, 8)] {
            assert!(d_t_threshold_stated(k, d, 1e9, 1.0) > 1.0);
        }
    }

    #[test]
    fn lemma1_margin_can_be_positive_while_centroid_rule_errs() {
        // class 0: ten sources on e1 plus the probed source on e2; class 1 split
        // between ±e3 so its centroid is the origin
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut source = Vec::new();
        for s in 0..11 {
            for _ in 0..2 {
                rows.push(if s == 10 {
                    vec![0.0, 1.0, 0.0]
                } else {
                    vec![1.0, 0.0, 0.0]
                });
                labels.push(0);
                source.push(s);
            }
        }
        for s in 0..2 {
            for _ in 0..2 {
                rows.push(vec![0.0, 0.0, if s == 0 { 1.0 } else { -1.0 }]);
                labels.push(1);
                source.push(11 + s);
            }
        }
        let spec = InstanceSpec {
            d: 3,
            phi_f: f64::INFINITY,
            ..InstanceSpec::default()
        };
        let x = Matrix::zeros(labels.len(), 8);
        let inst = TheoryInstance::from_parts(spec, x, labels, source).unwrap();
        let z = Matrix::from_rows(&rows).unwrap();
        let i = 20;
        let m = lemma1_margin(&z, &inst, i).unwrap();
        assert!((m[1] - 2.0 / 22.0).abs() < 1e-15);
        let c = class_centroids(&z, &inst.labels, 2).unwrap();
        assert_eq!(crate::eval::knn_classify(z.row(i), &c).unwrap(), 1);
    }

    #[test]
    fn lemma1_fuzz_counts_are_consistent() {
        let rep = lemma1_fuzz(50, 7).unwrap();
        assert_eq!(rep.instances, 50);
        assert!(rep.covered <= rep.samples && rep.counterexamples <= rep.covered);
        assert_eq!(rep, lemma1_fuzz(50, 7).unwrap());
    }

    #[test]
    fn bound_monotone_in_p_and_q() {
        let base = ConcentrationParams {
            d_t: 0.99,
            q_t: 0.0,
            delta_t: 0.995,
            p_t: 0.0,
        };
        let mut last = (0.0, 0.0);
        for g in 0..20 {
            let t = g as f64 * 1e-4;
            let bp = theorem_bound_for(&ConcentrationParams { p_t: t, ..base }, 2, 2, 200.0, 1.0).bound;
            let bq = theorem_bound_for(&ConcentrationParams { q_t: t, ..base }, 2, 2, 200.0, 1.0).bound;
            assert!(bp >= last.0 && bq >= last.1);
            last = (bp, bq);
        }
    }

    #[test]
    fn unconstrained_descent_separates_sources() {
        let spec = InstanceSpec {
            n: 2,
            d: 4,
            phi_f: 1e9,
            ..InstanceSpec::default()
        };
        let inst = TheoryInstance::generate(&spec, &mut RngState::new(5)).unwrap();
        let cfg = OptimConfig {
            penalties: vec![],
            restarts: 1,
            steps_per_stage: 5000,
            feasibility_gate: f64::INFINITY,
            ..OptimConfig::default()
        };
        let res = optimize_op1(&inst, &cfg, &mut RngState::new(6)).unwrap();
        let n = inst.len();
        let mut gap = 0.0;
        for i in 0..n {
            for j in 0..n {
                let target = if inst.w_hat(i, j) { 1.0 } else { 0.0 };
                gap += (dot(res.z.row(i), res.z.row(j)) - target).abs();
            }
        }
        assert!(gap / ((n * n) as f64) < 1e-3, "{gap}");
    }

    #[test]
    fn csv_format() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
        assert_eq!(SWEEP_HEADER.split(',').count(), 16);
    }
}
