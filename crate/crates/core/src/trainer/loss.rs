//! Batched composite objective: patch/image alignment, patch/image semantic
//! concentration and the prototype entropy term.

use serde::{Deserialize, Serialize};

use super::encoder::{encoder_backward, encoder_forward, EncoderCache, EncoderOutput, EncoderParams};
use crate::align::{extract_overlap_with_grad, softmax_cross_entropy};
use crate::cotap::{patch_sc_loss, CoTapConfig};
use crate::error::{LabError, Result};
use crate::numeric::Matrix;
use crate::oaf::{downsample_flatten, prototype_objective};
use crate::sinkhorn::{sinkhorn_normalize, SinkhornConfig};
use crate::synth::View;

/// Weights of the five loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda1_bar: f64,
    pub lambda2: f64,
    pub lambda2_bar: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda1_bar: 1.0,
            lambda2: 1.0,
            lambda2_bar: 1.0,
            lambda3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [
            self.lambda1,
            self.lambda1_bar,
            self.lambda2,
            self.lambda2_bar,
            self.lambda3,
        ];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(LabError::ConfigError(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(LabError::ConfigError(
                "at least one loss weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Settings shared by the loss terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub sinkhorn: SinkhornConfig,
    pub cotap: CoTapConfig,
    /// Online logits are `embedding / student_temp`.
    pub student_temp: f64,
    pub roi_hw: (usize, usize),
    /// Sinkhorn-normalise targets jointly over the whole batch instead of per view.
    pub batch_sinkhorn: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            sinkhorn: SinkhornConfig::default(),
            cotap: CoTapConfig::default(),
            student_temp: 0.1,
            roi_hw: (4, 4),
            batch_sinkhorn: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.sinkhorn.validate()?;
        self.cotap.validate()?;
        if !(self.student_temp > 0.0) || self.roi_hw.0 == 0 || self.roi_hw.1 == 0 {
            return Err(LabError::ConfigError("student_temp and roi_hw must be positive".into()));
        }
        Ok(())
    }
}

/// Views of one scene. The first two are the global views seen by the target branch.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub views: Vec<View>,
    pub object_centric: bool,
    /// Index of the randomly paired scene `x′` for the patch concentration term.
    pub partner: usize,
    /// A global view of a nearest-neighbour scene, for the image concentration term.
    pub neighbor: Option<View>,
}

#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

/// Unweighted per-term means; `total` is their weighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub align: f64,
    pub align_img: f64,
    pub sc: f64,
    pub sc_img: f64,
    pub proto: f64,
}

impl LossBreakdown {
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        w.lambda1 * self.align
            + w.lambda1_bar * self.align_img
            + w.lambda2 * self.sc
            + w.lambda2_bar * self.sc_img
            + w.lambda3 * self.proto
    }
}

struct Encoded {
    out: EncoderOutput,
    cache: EncoderCache,
    grad_dense: Vec<f64>,
    grad_cls: Vec<f64>,
}

fn encode(p: &EncoderParams, v: &View) -> Result<Encoded> {
    let (out, cache) = encoder_forward(p, &v.features)?;
    let grad_dense = vec![0.0; out.dense.data().len()];
    let grad_cls = vec![0.0; out.cls.len()];
    Ok(Encoded {
        out,
        cache,
        grad_dense,
        grad_cls,
    })
}

fn scaled(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x / s).collect()
}

/// Sinkhorn targets for row blocks, either jointly or block by block.
fn sinkhorn_blocks(blocks: &[Matrix], cfg: &LossConfig) -> Result<Vec<Matrix>> {
    if blocks.is_empty() {
        return Ok(Vec::new());
    }
    if !cfg.batch_sinkhorn {
        return blocks.iter().map(|m| sinkhorn_normalize(m, &cfg.sinkhorn)).collect();
    }
    let cols = blocks[0].cols();
    let rows: usize = blocks.iter().map(|m| m.rows()).sum();
    let data: Vec<f64> = blocks.iter().flat_map(|m| m.data().iter().copied()).collect();
    let q = sinkhorn_normalize(&Matrix::new(rows, cols, data)?, &cfg.sinkhorn)?;
    let mut out = Vec::with_capacity(blocks.len());
    let mut off = 0;
    for m in blocks {
        let n = m.rows() * cols;
        out.push(Matrix::new(m.rows(), cols, q.data()[off..off + n].to_vec())?);
        off += n;
    }
    Ok(out)
}

/// Cross-entropy of `softmax(online / t)` against fixed targets; gradient
/// w.r.t. the online rows is scaled and added to `grad`.
fn ce_rows(online: &[f64], q: &Matrix, t: f64, scale: f64, grad: Option<&mut [f64]>) -> Result<f64> {
    let d = q.cols();
    let logits = scaled(online, t);
    let rows = q.rows() as f64;
    let mut loss = 0.0;
    match grad {
        Some(g) => {
            for (i, gi) in g.chunks_exact_mut(d).enumerate() {
                let mut tmp = vec![0.0; d];
                loss += softmax_cross_entropy(&logits[i * d..(i + 1) * d], q.row(i), 1.0, Some(&mut tmp))?;
                gi.iter_mut().zip(&tmp).for_each(|(a, b)| *a += scale * b / (t * rows));
            }
        }
        None => {
            for i in 0..q.rows() {
                loss += softmax_cross_entropy(&logits[i * d..(i + 1) * d], q.row(i), 1.0, None)?;
            }
        }
    }
    Ok(loss / rows)
}

/// Composite objective averaged over the batch. Image-level terms only count
/// object-centric scenes; gradients flow into the online parameters only.
pub fn total_loss(
    batch: &Batch,
    online: &EncoderParams,
    target: &EncoderParams,
    weights: &LossWeights,
    cfg: &LossConfig,
    grad_out: Option<&mut EncoderParams>,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let b = batch.items.len();
    if b == 0 {
        return Err(LabError::EmptyInput("training batch"));
    }
    if b < 2 && weights.lambda2 > 0.0 {
        return Err(LabError::InsufficientBatch(b));
    }
    let want_grad = grad_out.is_some();
    let mut enc_online: Vec<Vec<Encoded>> = batch
        .items
        .iter()
        .map(|it| it.views.iter().map(|v| encode(online, v)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let enc_target: Vec<Vec<EncoderOutput>> = batch
        .items
        .iter()
        .map(|it| {
            if it.views.len() < 2 {
                return Err(LabError::ConfigError("each batch item needs two global views".into()));
            }
            it.views[..2]
                .iter()
                .map(|v| Ok(encoder_forward(target, &v.features)?.0))
                .collect()
        })
        .collect::<Result<_>>()?;

    let inv_b = 1.0 / b as f64;
    let t = cfg.student_temp;
    let mut bd = LossBreakdown::default();

    if weights.lambda1 > 0.0 {
        // every online view against each overlapping global target view
        let mut overlaps = Vec::new();
        for (bi, item) in batch.items.iter().enumerate() {
            let pairs: Vec<(usize, usize)> = (0..item.views.len())
                .flat_map(|vi| (0..2).map(move |ti| (vi, ti)))
                .filter(|&(vi, ti)| vi != ti && item.views[vi].crop.intersect(&item.views[ti].crop).is_some())
                .collect();
            let n = pairs.len();
            for (vi, ti) in pairs {
                let ov = extract_overlap_with_grad(
                    &enc_online[bi][vi].out.dense,
                    &item.views[vi].crop,
                    &enc_target[bi][ti].dense,
                    &item.views[ti].crop,
                    cfg.roi_hw,
                )?;
                overlaps.push((bi, vi, n, ov));
            }
        }
        let blocks: Vec<Matrix> = overlaps.iter().map(|o| o.3.b.to_matrix()).collect();
        let targets = sinkhorn_blocks(&blocks, cfg)?;
        for ((bi, vi, n, ov), q) in overlaps.iter().zip(&targets) {
            let share = inv_b / *n as f64;
            let loss = if want_grad {
                let mut g = vec![0.0; ov.a.data().len()];
                let l = ce_rows(ov.a.data(), q, t, weights.lambda1 * share, Some(&mut g))?;
                ov.backward_a(&g, &mut enc_online[*bi][*vi].grad_dense);
                l
            } else {
                ce_rows(ov.a.data(), q, t, 0.0, None)?
            };
            bd.align += share * loss;
        }
    }

    let image_terms = |targets: &[(usize, usize, Vec<f64>)]| -> Result<Vec<Matrix>> {
        let blocks: Vec<Matrix> = targets
            .iter()
            .map(|(_, _, c)| Matrix::new(1, c.len(), c.clone()))
            .collect::<Result<_>>()?;
        sinkhorn_blocks(&blocks, cfg)
    };
    if weights.lambda1_bar > 0.0 {
        // (item, online view, target cls)
        let mut pairs = Vec::new();
        for (bi, item) in batch.items.iter().enumerate().filter(|(_, it)| it.object_centric) {
            for vi in 0..item.views.len() {
                for (ti, t) in enc_target[bi].iter().enumerate().take(2) {
                    if vi != ti {
                        pairs.push((bi, vi, t.cls.clone()));
                    }
                }
            }
        }
        let qs = image_terms(&pairs)?;
        for ((bi, vi, _), q) in pairs.iter().zip(&qs) {
            let share = inv_b / (batch.items[*bi].views.len() * 2 - 2) as f64;
            let enc = &mut enc_online[*bi][*vi];
            let grad = want_grad.then_some(&mut enc.grad_cls[..]);
            bd.align_img += share * ce_rows(&enc.out.cls, q, t, weights.lambda1_bar * share, grad)?;
        }
    }
    if weights.lambda2_bar > 0.0 {
        let mut pairs = Vec::new();
        for (bi, item) in batch.items.iter().enumerate().filter(|(_, it)| it.object_centric) {
            if let Some(nb) = &item.neighbor {
                pairs.push((bi, 0, encoder_forward(target, &nb.features)?.0.cls));
            }
        }
        let qs = image_terms(&pairs)?;
        for ((bi, vi, _), q) in pairs.iter().zip(&qs) {
            let enc = &mut enc_online[*bi][*vi];
            let grad = want_grad.then_some(&mut enc.grad_cls[..]);
            bd.sc_img += inv_b * ce_rows(&enc.out.cls, q, t, weights.lambda2_bar * inv_b, grad)?;
        }
    }

    for (bi, item) in batch.items.iter().enumerate() {
        if weights.lambda2 > 0.0 {
            let pj = item.partner;
            if pj == bi || pj >= b {
                return Err(LabError::ConfigError(format!(
                    "invalid partner {pj} for batch item {bi}"
                )));
            }
            let (u_o, v_o) = (&enc_online[bi][0].out.dense, &enc_online[pj][0].out.dense);
            let (u_t, v_t) = (&enc_target[bi][0].dense, &enc_target[pj][0].dense);
            let loss = if want_grad {
                let mut gu = vec![0.0; u_o.data().len()];
                let mut gv = vec![0.0; v_o.data().len()];
                let l = patch_sc_loss(u_o, v_o, u_t, v_t, &cfg.cotap, Some(&mut gu), Some(&mut gv))?;
                let s = weights.lambda2 * inv_b;
                enc_online[bi][0]
                    .grad_dense
                    .iter_mut()
                    .zip(&gu)
                    .for_each(|(a, g)| *a += s * g);
                enc_online[pj][0]
                    .grad_dense
                    .iter_mut()
                    .zip(&gv)
                    .for_each(|(a, g)| *a += s * g);
                l
            } else {
                patch_sc_loss(u_o, v_o, u_t, v_t, &cfg.cotap, None, None)?
            };
            bd.sc += inv_b * loss;
        }
    }

    let mut grad_out = grad_out;
    if weights.lambda3 > 0.0 {
        if let Some(f) = &online.filter {
            let mut rows = Vec::new();
            for (item, tgt) in batch.items.iter().zip(&enc_target) {
                if item.object_centric {
                    for t in tgt {
                        rows.extend(downsample_flatten(&t.backbone, f.bank.ks)?);
                    }
                }
            }
            if !rows.is_empty() {
                let feats = Matrix::new(rows.len() / f.bank.row_len(), f.bank.row_len(), rows)?;
                bd.proto = match grad_out.as_deref_mut() {
                    Some(g) => {
                        let gf = g.filter.as_mut().expect("gradient layout mirrors parameters");
                        let mut gb = vec![0.0; f.bank.values.data().len()];
                        let l = prototype_objective(&f.bank, &feats, Some(&mut gb))?;
                        gf.bank
                            .values
                            .data_mut()
                            .iter_mut()
                            .zip(&gb)
                            .for_each(|(a, v)| *a += weights.lambda3 * v);
                        l
                    }
                    None => prototype_objective(&f.bank, &feats, None)?,
                };
            }
        }
    }

    if let Some(g) = grad_out {
        for enc in enc_online.iter().flatten() {
            let any_dense = enc.grad_dense.iter().any(|v| *v != 0.0);
            let any_cls = enc.grad_cls.iter().any(|v| *v != 0.0);
            if any_dense || any_cls {
                encoder_backward(
                    online,
                    &enc.out,
                    &enc.cache,
                    any_dense.then_some(&enc.grad_dense[..]),
                    any_cls.then_some(&enc.grad_cls[..]),
                    g,
                )?;
            }
        }
    }
    bd.total = bd.weighted_sum(weights);
    Ok(bd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_gradient, gradient_report, RngState};
    use crate::synth::{augment_view, AugmentConfig, Dataset, WorldConfig};
    use crate::trainer::EncoderConfig;

    fn setup(oaf: bool, b: usize) -> (Batch, EncoderParams, EncoderParams) {
        let world = WorldConfig {
            n_scenes: 8,
            ..WorldConfig::default()
        };
        let ds = Dataset::generate(&world, 3).unwrap();
        let mut rng = RngState::new(4);
        let small = AugmentConfig {
            out_hw: (2, 2),
            ..AugmentConfig::default()
        };
        let items = (0..b)
            .map(|i| {
                let s = &ds.scenes[i];
                let views = (0..3)
                    .map(|k| {
                        augment_view(
                            s,
                            &if k < 2 { small.clone() } else { AugmentConfig::local() }.sample(&mut rng),
                        )
                        .unwrap()
                    })
                    .collect();
                BatchItem {
                    views,
                    object_centric: true,
                    partner: (i + 1) % b,
                    neighbor: Some(augment_view(&ds.scenes[7], &small.sample(&mut rng)).unwrap()),
                }
            })
            .collect();
        let cfg = EncoderConfig {
            dim: 4,
            hidden: 5,
            out_dim: 4,
            oaf,
            prototypes: 2,
            proto_ks: 1,
            attn_dim: 2,
            ..EncoderConfig::default()
        };
        let online = EncoderParams::random(&cfg, &mut rng).unwrap();
        let target = EncoderParams::random(&cfg, &mut rng).unwrap();
        (Batch { items }, online, target)
    }

    fn cfg() -> LossConfig {
        LossConfig {
            roi_hw: (2, 2),
            ..LossConfig::default()
        }
    }

    #[test]
    fn breakdown_sums_to_total() {
        let (batch, online, target) = setup(true, 2);
        let w = LossWeights {
            lambda1: 0.3,
            lambda1_bar: 0.7,
            lambda2: 1.1,
            lambda2_bar: 0.5,
            lambda3: 2.0,
        };
        let bd = total_loss(&batch, &online, &target, &w, &cfg(), None).unwrap();
        assert!(bd.align > 0.0 && bd.align_img > 0.0 && bd.sc_img > 0.0 && bd.proto > 0.0);
        assert!((bd.total - bd.weighted_sum(&w)).abs() <= 1e-12);
    }

    #[test]
    fn single_item_batch_rejected_with_sc() {
        let (batch, online, target) = setup(false, 1);
        let r = total_loss(&batch, &online, &target, &LossWeights::default(), &cfg(), None);
        assert!(matches!(r, Err(LabError::InsufficientBatch(1))));
        let w = LossWeights {
            lambda2: 0.0,
            ..LossWeights::default()
        };
        assert!(total_loss(&batch, &online, &target, &w, &cfg(), None).is_ok());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for oaf in [false, true] {
            let (batch, online, target) = setup(oaf, 2);
            let w = LossWeights::default();
            let mut g = online.zeros_like();
            total_loss(&batch, &online, &target, &w, &cfg(), Some(&mut g)).unwrap();
            let mut probe = online.clone();
            let num = finite_diff_gradient(
                |x| {
                    probe.set_flat(x).unwrap();
                    total_loss(&batch, &probe, &target, &w, &cfg(), None).unwrap().total
                },
                &online.flat(),
                1e-6,
            )
            .unwrap();
            let err = gradient_report(&g.flat(), &num).unwrap();
            assert!(err < 1e-4, "oaf={oaf}: {err}");
        }
    }
}
