//! Object-aware filter: prototypes learned by entropy minimisation over
//! object-centric features, and patch-to-prototype cross-attention.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, LabError, Result};
use crate::numeric::{
    dot, l2_normalize, normalize_backward, read_tensor, softmax, softmax_backward, write_tensor, FeatureGrid, Matrix,
    RngState,
};

/// `M` prototypes of shape `Ks×Ks×D`, stored as `M` rows of length `Ks²·D`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub m: usize,
    pub ks: usize,
    pub d: usize,
    pub values: Matrix,
    pub tau3: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct BankSidecar {
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "Ks")]
    ks: usize,
    #[serde(rename = "D")]
    d: usize,
    tau3: f64,
}

impl PrototypeBank {
    pub fn new(m: usize, ks: usize, d: usize, tau3: f64, values: Matrix) -> Result<Self> {
        if m == 0 || ks == 0 || d == 0 {
            return Err(shape_err("empty prototype bank"));
        }
        if values.rows() != m || values.cols() != ks * ks * d {
            return Err(shape_err(format!(
                "bank values {}x{} for M={m}, Ks={ks}, D={d}",
                values.rows(),
                values.cols()
            )));
        }
        if !(tau3 > 0.0) {
            return Err(LabError::ConfigError("tau3 must be positive".into()));
        }
        Ok(Self { m, ks, d, values, tau3 })
    }

    pub fn random(m: usize, ks: usize, d: usize, tau3: f64, rng: &mut RngState) -> Result<Self> {
        let std = 1.0 / ((ks * ks * d) as f64).sqrt();
        let values = Matrix::new(m, ks * ks * d, rng.normal_vec(m * ks * ks * d, std))?;
        Self::new(m, ks, d, tau3, values)
    }

    pub fn row_len(&self) -> usize {
        self.ks * self.ks * self.d
    }

    /// Mean over the `Ks²` positions of each prototype, `M×D`.
    pub fn pooled(&self) -> Matrix {
        let k2 = (self.ks * self.ks) as f64;
        let mut out = Matrix::zeros(self.m, self.d);
        for mi in 0..self.m {
            let dst = out.row_mut(mi);
            for pos in self.values.row(mi).chunks_exact(self.d) {
                for (o, v) in dst.iter_mut().zip(pos) {
                    *o += v / k2;
                }
            }
        }
        out
    }

    /// Writes `<stem>.bin` (tensor dump) and `<stem>.json` (shape sidecar).
    pub fn save(&self, stem: &Path) -> Result<()> {
        write_tensor(&stem.with_extension("bin"), &self.values)?;
        let side = BankSidecar {
            m: self.m,
            ks: self.ks,
            d: self.d,
            tau3: self.tau3,
        };
        fs::write(stem.with_extension("json"), serde_json::to_string(&side)?)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let side: BankSidecar = serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)?;
        let values = read_tensor(&stem.with_extension("bin"))?;
        Self::new(side.m, side.ks, side.d, side.tau3, values)
    }
}

fn check_rows_normalized(feats: &Matrix) -> Result<()> {
    for (i, row) in feats.row_iter().enumerate() {
        let n = dot(row, row).sqrt();
        if (n - 1.0).abs() > 1e-9 {
            return Err(LabError::InvariantViolation(format!("feature row {i} has norm {n}")));
        }
    }
    Ok(())
}

struct Similarity {
    unit: Matrix,
    norms: Vec<f64>,
    phi: Matrix,
}

fn similarity_parts(bank: &PrototypeBank, feats: &Matrix) -> Result<Similarity> {
    if feats.cols() != bank.row_len() {
        return Err(shape_err(format!(
            "features of width {} against prototypes of width {}",
            feats.cols(),
            bank.row_len()
        )));
    }
    if feats.rows() == 0 {
        return Err(LabError::EmptyInput("prototype features"));
    }
    let mut unit = bank.values.clone();
    let mut norms = Vec::with_capacity(bank.m);
    for mi in 0..bank.m {
        norms.push(l2_normalize(unit.row_mut(mi)).ok_or(LabError::DegenerateRow(mi))?);
    }
    let logits = unit.matmul_t(feats)?;
    let mut phi = Matrix::zeros(bank.m, feats.rows());
    for mi in 0..bank.m {
        let row = softmax(logits.row(mi), bank.tau3)?;
        phi.row_mut(mi).copy_from_slice(&row);
    }
    Ok(Similarity { unit, norms, phi })
}

/// `φ = softmax_rows(U↓ F↓ᵀ / τ₃)`, one row per prototype over the feature set.
pub fn prototype_similarity(bank: &PrototypeBank, feats: &Matrix) -> Result<Matrix> {
    check_rows_normalized(feats)?;
    Ok(similarity_parts(bank, feats)?.phi)
}

/// `−1/(|D̄|M) Σ φ log φ`; adds `dL/dφ` into `grad_out` when given.
pub fn prototype_loss(phi: &Matrix, grad_out: Option<&mut [f64]>) -> Result<f64> {
    let scale = 1.0 / (phi.rows() * phi.cols()) as f64;
    let mut loss = 0.0;
    for v in phi.data() {
        if *v > 0.0 {
            loss -= v * v.ln();
        }
    }
    if let Some(gr) = grad_out {
        if gr.len() != phi.data().len() {
            return Err(shape_err("prototype loss gradient length"));
        }
        for (o, v) in gr.iter_mut().zip(phi.data()) {
            if *v > 0.0 {
                *o -= scale * (v.ln() + 1.0);
            }
        }
    }
    Ok(loss * scale)
}

/// Entropy objective as a function of the raw prototype values; adds the
/// gradient w.r.t. `bank.values` into `grad_bank`.
pub fn prototype_objective(bank: &PrototypeBank, feats: &Matrix, grad_bank: Option<&mut [f64]>) -> Result<f64> {
    let s = similarity_parts(bank, feats)?;
    let Some(gb) = grad_bank else {
        return prototype_loss(&s.phi, None);
    };
    if gb.len() != bank.values.data().len() {
        return Err(shape_err("prototype gradient length"));
    }
    let mut g_phi = vec![0.0; s.phi.data().len()];
    let loss = prototype_loss(&s.phi, Some(&mut g_phi))?;
    let n = feats.rows();
    let w = bank.row_len();
    for mi in 0..bank.m {
        let g_logit = softmax_backward(s.phi.row(mi), &g_phi[mi * n..(mi + 1) * n], bank.tau3);
        let mut g_unit = vec![0.0; w];
        for (j, gl) in g_logit.iter().enumerate() {
            for (o, f) in g_unit.iter_mut().zip(feats.row(j)) {
                *o += gl * f;
            }
        }
        let g_raw = normalize_backward(s.unit.row(mi), s.norms[mi], &g_unit);
        for (o, g) in gb[mi * w..(mi + 1) * w].iter_mut().zip(g_raw) {
            *o += g;
        }
    }
    Ok(loss)
}

/// Adaptive average pool to `Ks×Ks`, flattened as `(row, col, channel)` and normalised.
pub fn downsample_flatten(grid: &FeatureGrid, ks: usize) -> Result<Vec<f64>> {
    let (h, w, d) = (grid.height(), grid.width(), grid.dim());
    if ks == 0 || h < ks || w < ks {
        return Err(shape_err(format!("cannot pool {h}x{w} to {ks}x{ks}")));
    }
    let bin = |i: usize, n: usize| (i * n / ks, ((i + 1) * n).div_ceil(ks));
    let mut out = vec![0.0; ks * ks * d];
    for bi in 0..ks {
        let (r0, r1) = bin(bi, h);
        for bj in 0..ks {
            let (c0, c1) = bin(bj, w);
            let cnt = ((r1 - r0) * (c1 - c0)) as f64;
            let dst = &mut out[(bi * ks + bj) * d..(bi * ks + bj + 1) * d];
            for r in r0..r1 {
                for c in c0..c1 {
                    for (o, v) in dst.iter_mut().zip(grid.at(r, c)) {
                        *o += v / cnt;
                    }
                }
            }
        }
    }
    l2_normalize(&mut out).ok_or(LabError::DegenerateRow(0))?;
    Ok(out)
}

/// Query/key/value maps, each `D′×D`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

impl AttentionWeights {
    pub fn new(wq: Matrix, wk: Matrix, wv: Matrix) -> Result<Self> {
        let s = (wq.rows(), wq.cols());
        if (wk.rows(), wk.cols()) != s || (wv.rows(), wv.cols()) != s {
            return Err(shape_err("attention maps differ in shape"));
        }
        Ok(Self { wq, wk, wv })
    }

    /// Gaussian init with standard deviation `1/√D`.
    pub fn random(d: usize, d_prime: usize, rng: &mut RngState) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let mut mk = || Matrix::new(d_prime, d, rng.normal_vec(d_prime * d, std)).expect("shape");
        let (wq, wk, wv) = (mk(), mk(), mk());
        Self { wq, wk, wv }
    }

    pub fn d(&self) -> usize {
        self.wq.cols()
    }

    pub fn d_prime(&self) -> usize {
        self.wq.rows()
    }
}

/// Gradients of the filter inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterGrads {
    pub h: Vec<f64>,
    pub bank: Vec<f64>,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
}

impl FilterGrads {
    pub fn zeros(hw: usize, bank: &PrototypeBank, w: &AttentionWeights) -> Self {
        let n = w.wq.data().len();
        Self {
            h: vec![0.0; hw * bank.d],
            bank: vec![0.0; bank.values.data().len()],
            wq: vec![0.0; n],
            wk: vec![0.0; n],
            wv: vec![0.0; n],
        }
    }
}

/// Forward state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct FilterCache {
    pooled: Matrix,
    hq: Matrix,
    keys: Matrix,
    vals: Matrix,
    attn: Matrix,
}

fn mat_vec(m: &Matrix, x: &[f64]) -> Vec<f64> {
    m.row_iter().map(|r| dot(r, x)).collect()
}

/// Adds `Mᵀ g` into `out`.
fn mat_t_vec_acc(m: &Matrix, g: &[f64], out: &mut [f64]) {
    for (r, gi) in m.row_iter().zip(g) {
        for (o, v) in out.iter_mut().zip(r) {
            *o += gi * v;
        }
    }
}

/// Adds `g xᵀ` into a row-major `len(g)×len(x)` buffer.
fn outer_acc(g: &[f64], x: &[f64], out: &mut [f64]) {
    let c = x.len();
    for (i, gi) in g.iter().enumerate() {
        for (o, xv) in out[i * c..(i + 1) * c].iter_mut().zip(x) {
            *o += gi * xv;
        }
    }
}

/// Patches attend to pooled prototype keys; output is `h ⊕ Σ_m a_m v̄_m`.
pub fn prototype_filter_forward(
    h: &FeatureGrid,
    bank: &PrototypeBank,
    w: &AttentionWeights,
) -> Result<(FeatureGrid, FilterCache)> {
    if h.dim() != bank.d || w.d() != bank.d {
        return Err(shape_err(format!(
            "filter dims: features {}, prototypes {}, maps {}",
            h.dim(),
            bank.d,
            w.d()
        )));
    }
    let (d, dp, n) = (h.dim(), w.d_prime(), h.num_patches());
    let pooled = bank.pooled();
    let keys = pooled.matmul_t(&w.wk)?;
    let vals = pooled.matmul_t(&w.wv)?;
    let scale = (dp as f64).sqrt();
    let mut hq = Matrix::zeros(n, dp);
    let mut attn = Matrix::zeros(n, bank.m);
    let mut out = Vec::with_capacity(n * (d + dp));
    for p in 0..n {
        let q = mat_vec(&w.wq, h.patch(p));
        let mu: Vec<f64> = keys.row_iter().map(|k| dot(&q, k)).collect();
        let a = softmax(&mu, scale)?;
        out.extend_from_slice(h.patch(p));
        let mut mix = vec![0.0; dp];
        for (am, v) in a.iter().zip(vals.row_iter()) {
            for (o, x) in mix.iter_mut().zip(v) {
                *o += am * x;
            }
        }
        out.extend(mix);
        hq.row_mut(p).copy_from_slice(&q);
        attn.row_mut(p).copy_from_slice(&a);
    }
    let grid = FeatureGrid::new(h.height(), h.width(), d + dp, out)?;
    Ok((
        grid,
        FilterCache {
            pooled,
            hq,
            keys,
            vals,
            attn,
        },
    ))
}

/// Accumulates gradients of all filter inputs given `dL/d out`.
pub fn prototype_filter_backward(
    h: &FeatureGrid,
    bank: &PrototypeBank,
    w: &AttentionWeights,
    cache: &FilterCache,
    grad_out: &[f64],
    grads: &mut FilterGrads,
) -> Result<()> {
    let (d, dp, n, m) = (h.dim(), w.d_prime(), h.num_patches(), bank.m);
    if grad_out.len() != n * (d + dp) {
        return Err(shape_err("filter output gradient length"));
    }
    let scale = (dp as f64).sqrt();
    let mut g_keys = Matrix::zeros(m, dp);
    let mut g_vals = Matrix::zeros(m, dp);
    for p in 0..n {
        let go = &grad_out[p * (d + dp)..(p + 1) * (d + dp)];
        let (g_h_direct, g_mix) = go.split_at(d);
        let a = cache.attn.row(p);
        for (mi, am) in a.iter().enumerate() {
            for (o, g) in g_vals.row_mut(mi).iter_mut().zip(g_mix) {
                *o += am * g;
            }
        }
        let g_a: Vec<f64> = cache.vals.row_iter().map(|v| dot(v, g_mix)).collect();
        let g_mu = softmax_backward(a, &g_a, scale);
        let mut g_q = vec![0.0; dp];
        mat_t_vec_acc(&cache.keys, &g_mu, &mut g_q);
        let q = cache.hq.row(p);
        for (mi, gm) in g_mu.iter().enumerate() {
            for (o, x) in g_keys.row_mut(mi).iter_mut().zip(q) {
                *o += gm * x;
            }
        }
        let gh = &mut grads.h[p * d..(p + 1) * d];
        for (o, g) in gh.iter_mut().zip(g_h_direct) {
            *o += g;
        }
        mat_t_vec_acc(&w.wq, &g_q, gh);
        outer_acc(&g_q, h.patch(p), &mut grads.wq);
    }
    let k2 = (bank.ks * bank.ks) as f64;
    for mi in 0..m {
        let u = cache.pooled.row(mi);
        outer_acc(g_keys.row(mi), u, &mut grads.wk);
        outer_acc(g_vals.row(mi), u, &mut grads.wv);
        let mut g_u = vec![0.0; d];
        mat_t_vec_acc(&w.wk, g_keys.row(mi), &mut g_u);
        mat_t_vec_acc(&w.wv, g_vals.row(mi), &mut g_u);
        let row = &mut grads.bank[mi * bank.row_len()..(mi + 1) * bank.row_len()];
        for pos in row.chunks_exact_mut(d) {
            for (o, g) in pos.iter_mut().zip(&g_u) {
                *o += g / k2;
            }
        }
    }
    Ok(())
}

/// Forward plus optional backward in one call.
pub fn prototype_filter(
    h: &FeatureGrid,
    bank: &PrototypeBank,
    w: &AttentionWeights,
    grad: Option<(&[f64], &mut FilterGrads)>,
) -> Result<FeatureGrid> {
    let (out, cache) = prototype_filter_forward(h, bank, w)?;
    if let Some((g_out, grads)) = grad {
        prototype_filter_backward(h, bank, w, &cache, g_out, grads)?;
    }
    Ok(out)
}

/// One gradient-descent step of the entropy objective over a feature batch.
pub fn update_prototypes(bank: &PrototypeBank, feats_batch: &Matrix, learning_rate: f64) -> Result<PrototypeBank> {
    if feats_batch.rows() == 0 {
        return Err(LabError::EmptyInput("prototype batch"));
    }
    let mut grad = vec![0.0; bank.values.data().len()];
    prototype_objective(bank, feats_batch, Some(&mut grad))?;
    let mut out = bank.clone();
    for (v, g) in out.values.data_mut().iter_mut().zip(&grad) {
        *v -= learning_rate * g;
    }
    Ok(out)
}
