//! Finite-difference gradient suites and randomized oracle checks shared by
//! the `gradcheck` / `verify` commands and the acceptance tests.

use serde::{Deserialize, Serialize};

use crate::align::{image_align_loss, patch_align_loss};
use crate::cotap::{
    ap_loss_at_threshold, bce_correspondence_loss, cotap_bound_exact, cotap_exact, cotap_loss, gamma_tilde_from_gamma,
    huber_surrogate, patch_sc_loss, psi_weights, CoTapConfig, ScorePair,
};
use crate::error::{LabError, Result};
use crate::numeric::{
    dot, finite_diff_gradient, gradient_report, l2_normalize_rows, FeatureGrid, Matrix, RngState, DEFAULT_GRAD_EPS,
    DEFAULT_GRAD_TOLERANCE,
};
use crate::oaf::{prototype_filter, prototype_objective, AttentionWeights, FilterGrads, PrototypeBank};
use crate::sinkhorn::{sinkhorn_normalize, SinkhornConfig};
use crate::synth::{augment_view, AugmentConfig, Dataset, WorldConfig, CHANNELS};
use crate::trainer::{
    encoder_backward, encoder_forward, total_loss, Batch, BatchItem, EncoderConfig, EncoderParams, LossConfig,
    LossWeights,
};

pub const GRAD_CASES: [&str; 9] = [
    "patch_align",
    "image_align",
    "cotap",
    "bce",
    "patch_sc",
    "proto",
    "oaf",
    "encoder",
    "total_loss",
];

/// The composed objective is checked at ten times the per-loss threshold.
pub const TOTAL_LOSS_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub losses: Vec<String>,
    pub points: usize,
    pub eps: f64,
    pub threshold: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            losses: GRAD_CASES.iter().map(|s| s.to_string()).collect(),
            points: 20,
            eps: DEFAULT_GRAD_EPS,
            threshold: DEFAULT_GRAD_TOLERANCE,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.losses.is_empty() {
            return Err(LabError::ConfigError("gradcheck loss list is empty".into()));
        }
        if let Some(bad) = self.losses.iter().find(|l| !GRAD_CASES.contains(&l.as_str())) {
            return Err(LabError::ConfigError(format!(
                "unknown loss '{bad}' (known: {})",
                GRAD_CASES.join(", ")
            )));
        }
        if !(self.eps > 0.0) || !(self.threshold >= 0.0) {
            return Err(LabError::ConfigError(
                "gradcheck eps must be positive, threshold non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCaseReport {
    pub loss: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub cases: Vec<GradCaseReport>,
    pub passed: bool,
}

/// Runs each requested finite-difference suite at `points` random points.
pub fn run_gradcheck(cfg: &GradcheckConfig, seed: u64) -> Result<GradcheckReport> {
    cfg.validate()?;
    let mut cases = Vec::with_capacity(cfg.losses.len());
    for (ci, name) in cfg.losses.iter().enumerate() {
        let mut rng = RngState::new(seed).fork(ci as u64 + 1);
        let mut worst: f64 = 0.0;
        for _ in 0..cfg.points {
            worst = worst.max(grad_case(name, cfg.eps, &mut rng)?);
        }
        let threshold = if name == "total_loss" {
            cfg.threshold * TOTAL_LOSS_FACTOR
        } else {
            cfg.threshold
        };
        cases.push(GradCaseReport {
            loss: name.clone(),
            points: cfg.points,
            max_rel_error: worst,
            threshold,
            passed: worst <= threshold,
        });
    }
    let passed = cases.iter().all(|c| c.passed);
    Ok(GradcheckReport { seed, cases, passed })
}

/// Relative error of one random instance of `name`.
pub fn grad_case(name: &str, eps: f64, rng: &mut RngState) -> Result<f64> {
    match name {
        "patch_align" => {
            let sk = SinkhornConfig::default();
            let t = FeatureGrid::new(2, 2, 4, rng.normal_vec(16, 1.0))?;
            let x = rng.normal_vec(16, 1.0);
            let mut g = vec![0.0; 16];
            patch_align_loss(&FeatureGrid::new(2, 2, 4, x.clone())?, &t, &sk, Some(&mut g))?;
            let num = finite_diff_gradient(
                |v| patch_align_loss(&grid(2, 2, 4, v), &t, &sk, None).unwrap_or(f64::NAN),
                &x,
                eps,
            )?;
            gradient_report(&g, &num)
        }
        "image_align" => {
            let sk = SinkhornConfig::default();
            let t = rng.normal_vec(6, 0.2);
            let x = rng.normal_vec(6, 1.0);
            let mut g = vec![0.0; 6];
            image_align_loss(&x, &t, &sk, Some(&mut g))?;
            let num = finite_diff_gradient(|v| image_align_loss(v, &t, &sk, None).unwrap_or(f64::NAN), &x, eps)?;
            gradient_report(&g, &num)
        }
        "cotap" => {
            let cfg = CoTapConfig::default();
            let n = 16;
            let p: Vec<f64> = (0..n).map(|_| rng.uniform_in(0.05, 0.95)).collect();
            let q: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            let sp = ScorePair::new(p.clone(), q.clone())?;
            let mut g = vec![0.0; n];
            cotap_loss(&sp, &cfg, Some(&mut g))?;
            // ψ and γ̃ are constants of the backward pass; freeze them at p
            let psi = psi_weights(&sp);
            let frozen = |x: &[f64]| {
                (0..n)
                    .map(|i| {
                        let gt = (q[i] - cfg.tau1).max(0.0);
                        let s: f64 = (0..n)
                            .filter(|&j| q[j] < q[i])
                            .map(|j| huber_surrogate(x[i] - x[j], cfg.tau2))
                            .sum();
                        let a = psi[i] * s;
                        gt * a / (1.0 + a)
                    })
                    .sum::<f64>()
                    / n as f64
            };
            let num = finite_diff_gradient(frozen, &p, eps)?;
            gradient_report(&g, &num)
        }
        "bce" => {
            let n = 12;
            let p: Vec<f64> = (0..n).map(|_| rng.uniform_in(0.05, 0.95)).collect();
            let q: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            let mut g = vec![0.0; n];
            bce_correspondence_loss(&ScorePair::new(p.clone(), q.clone())?, Some(&mut g))?;
            let num = finite_diff_gradient(
                |x| {
                    ScorePair::new(x.to_vec(), q.clone())
                        .and_then(|s| bce_correspondence_loss(&s, None))
                        .unwrap_or(f64::NAN)
                },
                &p,
                eps,
            )?;
            gradient_report(&g, &num)
        }
        "patch_sc" => {
            let cfg = CoTapConfig::default();
            let unit = |rng: &mut RngState| -> Result<Vec<f64>> {
                Ok(l2_normalize_rows(&Matrix::new(4, 3, rng.normal_vec(12, 1.0))?)?.into_data())
            };
            let (u, v) = (unit(rng)?, unit(rng)?);
            let (ut, vt) = (grid(2, 2, 3, &unit(rng)?), grid(2, 2, 3, &unit(rng)?));
            let mut gu = vec![0.0; 12];
            let mut gv = vec![0.0; 12];
            patch_sc_loss(
                &grid(2, 2, 3, &u),
                &grid(2, 2, 3, &v),
                &ut,
                &vt,
                &cfg,
                Some(&mut gu),
                Some(&mut gv),
            )?;
            let x: Vec<f64> = u.iter().chain(&v).copied().collect();
            // ψ is a stop-gradient weight; keep it fixed by evaluating the
            // frozen objective on the score pair built from x
            let s0 = sc_scores(&x, &ut, &vt)?;
            let psi = psi_weights(&s0);
            let q = s0.target().to_vec();
            let frozen = |x: &[f64]| {
                let p = sc_scores(x, &ut, &vt).map(|s| s.online().to_vec()).unwrap_or_default();
                if p.len() != q.len() {
                    return f64::NAN;
                }
                let n = p.len();
                (0..n)
                    .map(|i| {
                        let gt = (q[i] - cfg.tau1).max(0.0);
                        let s: f64 = (0..n)
                            .filter(|&j| q[j] < q[i])
                            .map(|j| huber_surrogate(p[i] - p[j], cfg.tau2))
                            .sum();
                        let a = psi[i] * s;
                        gt * a / (1.0 + a)
                    })
                    .sum::<f64>()
                    / n as f64
            };
            let num = finite_diff_gradient(frozen, &x, eps)?;
            let g: Vec<f64> = gu.into_iter().chain(gv).collect();
            gradient_report(&g, &num)
        }
        "proto" => {
            let bank = PrototypeBank::random(3, 1, 4, 0.1, rng)?;
            let feats = l2_normalize_rows(&Matrix::new(5, 4, rng.normal_vec(20, 1.0))?)?;
            let x = bank.values.data().to_vec();
            let mut g = vec![0.0; x.len()];
            prototype_objective(&bank, &feats, Some(&mut g))?;
            let mut probe = bank.clone();
            let num = finite_diff_gradient(
                |v| {
                    probe.values.data_mut().copy_from_slice(v);
                    prototype_objective(&probe, &feats, None).unwrap_or(f64::NAN)
                },
                &x,
                eps,
            )?;
            gradient_report(&g, &num)
        }
        "oaf" => {
            let (d, dp, hw) = (3, 2, (2, 2));
            let n = hw.0 * hw.1;
            let bank = PrototypeBank::random(3, 1, d, 0.1, rng)?;
            let w = AttentionWeights::random(d, dp, rng);
            let h = rng.normal_vec(n * d, 1.0);
            let probe_w = rng.normal_vec(n * (d + dp), 1.0);
            let mut grads = FilterGrads::zeros(n, &bank, &w);
            prototype_filter(&grid(hw.0, hw.1, d, &h), &bank, &w, Some((&probe_w, &mut grads)))?;
            let sizes = [h.len(), bank.values.data().len(), dp * d, dp * d];
            let x: Vec<f64> = h
                .iter()
                .chain(bank.values.data())
                .chain(w.wq.data())
                .chain(w.wk.data())
                .chain(w.wv.data())
                .copied()
                .collect();
            let num = finite_diff_gradient(
                |v| {
                    let (h, rest) = v.split_at(sizes[0]);
                    let (bv, rest) = rest.split_at(sizes[1]);
                    let (wq, rest) = rest.split_at(sizes[2]);
                    let (wk, wv) = rest.split_at(sizes[3]);
                    let m = |s: &[f64]| Matrix::new(dp, d, s.to_vec());
                    let run = || -> Result<f64> {
                        let b =
                            PrototypeBank::new(bank.m, bank.ks, d, bank.tau3, Matrix::new(bank.m, d, bv.to_vec())?)?;
                        let w = AttentionWeights::new(m(wq)?, m(wk)?, m(wv)?)?;
                        let out = prototype_filter(&grid(hw.0, hw.1, d, h), &b, &w, None)?;
                        Ok(dot(out.data(), &probe_w))
                    };
                    run().unwrap_or(f64::NAN)
                },
                &x,
                eps,
            )?;
            let g: Vec<f64> = grads
                .h
                .into_iter()
                .chain(grads.bank)
                .chain(grads.wq)
                .chain(grads.wk)
                .chain(grads.wv)
                .collect();
            gradient_report(&g, &num)
        }
        "encoder" => {
            let oaf = rng.below(2) == 1;
            let p = EncoderParams::random(&small_encoder(oaf), rng)?;
            let v = FeatureGrid::new(2, 2, CHANNELS, rng.normal_vec(4 * CHANNELS, 1.0))?;
            let out_dim = p.cfg.out_dim;
            let wd = rng.normal_vec(4 * out_dim, 1.0);
            let wc = rng.normal_vec(out_dim, 1.0);
            let (out, cache) = encoder_forward(&p, &v)?;
            let mut g = p.zeros_like();
            encoder_backward(&p, &out, &cache, Some(&wd), Some(&wc), &mut g)?;
            let mut probe = p.clone();
            let num = finite_diff_gradient(
                |x| {
                    let run = |probe: &mut EncoderParams| -> Result<f64> {
                        probe.set_flat(x)?;
                        let o = encoder_forward(probe, &v)?.0;
                        Ok(dot(o.dense.data(), &wd) + dot(&o.cls, &wc))
                    };
                    run(&mut probe).unwrap_or(f64::NAN)
                },
                &p.flat(),
                eps,
            )?;
            gradient_report(&g.flat(), &num)
        }
        "total_loss" => {
            let oaf = rng.below(2) == 1;
            let (batch, online, target) = small_batch(oaf, rng)?;
            let w = LossWeights::default();
            let cfg = LossConfig::default();
            let mut g = online.zeros_like();
            total_loss(&batch, &online, &target, &w, &cfg, Some(&mut g))?;
            let mut probe = online.clone();
            let num = finite_diff_gradient(
                |x| {
                    let run = |probe: &mut EncoderParams| -> Result<f64> {
                        probe.set_flat(x)?;
                        Ok(total_loss(&batch, probe, &target, &w, &cfg, None)?.total)
                    };
                    run(&mut probe).unwrap_or(f64::NAN)
                },
                &online.flat(),
                eps,
            )?;
            gradient_report(&g.flat(), &num)
        }
        other => Err(LabError::ConfigError(format!("unknown loss '{other}'"))),
    }
}

fn grid(h: usize, w: usize, d: usize, data: &[f64]) -> FeatureGrid {
    FeatureGrid::new(h, w, d, data.to_vec()).expect("caller passes a full grid")
}

/// Score pair of the cross-image map for online grids packed as `u ⊕ v`.
fn sc_scores(x: &[f64], ut: &FeatureGrid, vt: &FeatureGrid) -> Result<ScorePair> {
    let (u, v) = x.split_at(x.len() / 2);
    let (u, v) = (grid(2, 2, 3, u), grid(2, 2, 3, v));
    let s = |a: &FeatureGrid, b: &FeatureGrid| -> Vec<f64> {
        (0..a.num_patches())
            .flat_map(|i| (0..b.num_patches()).map(move |j| (dot(a.patch(i), b.patch(j)) * 0.5 + 0.5).clamp(0.0, 1.0)))
            .collect()
    };
    ScorePair::new(s(&u, &v), s(ut, vt))
}

fn small_encoder(oaf: bool) -> EncoderConfig {
    EncoderConfig {
        dim: 4,
        hidden: 5,
        out_dim: 4,
        oaf,
        prototypes: 2,
        proto_ks: 1,
        attn_dim: 2,
        ..EncoderConfig::default()
    }
}

/// Two-item batch of 2×2 global views plus one local view each.
fn small_batch(oaf: bool, rng: &mut RngState) -> Result<(Batch, EncoderParams, EncoderParams)> {
    let world = WorldConfig {
        n_scenes: 4,
        ..WorldConfig::default()
    };
    let ds = Dataset::generate(&world, rng.below(1 << 30) as u64)?;
    let global = AugmentConfig {
        out_hw: (2, 2),
        ..AugmentConfig::default()
    };
    let b = 2;
    let mut items = Vec::with_capacity(b);
    for i in 0..b {
        let s = &ds.scenes[i];
        let mut views = Vec::with_capacity(3);
        for k in 0..3 {
            let aug = if k < 2 { global.clone() } else { AugmentConfig::local() };
            views.push(augment_view(s, &aug.sample(rng))?);
        }
        items.push(BatchItem {
            views,
            object_centric: true,
            partner: (i + 1) % b,
            neighbor: Some(augment_view(&ds.scenes[3], &global.sample(rng))?),
        });
    }
    let cfg = small_encoder(oaf);
    let online = EncoderParams::random(&cfg, rng)?;
    let target = EncoderParams::random(&cfg, rng)?;
    Ok((Batch { items }, online, target))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckCount {
    pub trials: usize,
    pub violations: usize,
}

impl CheckCount {
    fn record(&mut self, ok: bool) {
        self.trials += 1;
        if !ok {
            self.violations += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub ap_oracle: CheckCount,
    pub proposition_bound: CheckCount,
    /// Largest observed `cotap_exact − cotap_bound_exact` (≤ 0 when sound).
    pub proposition_worst_gap: f64,
    pub sinkhorn_marginals: CheckCount,
    /// Largest column-sum deviation from `B/D` over the Sinkhorn trials.
    pub sinkhorn_worst_column_dev: f64,
    pub rank_invariance: CheckCount,
    pub passed: bool,
}

/// Round-off slack allowed between the exact CoTAP value and its bound; the
/// two are summed in different orders.
pub const BOUND_SLACK: f64 = 1e-12;

/// τ₁ used for the weight `γ(q) = [q − τ₁]₊` in the bound fuzzing.
pub const FUZZ_TAU1: f64 = -0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub trials: usize,
    pub sinkhorn: SinkhornConfig,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            trials: 1000,
            sinkhorn: SinkhornConfig {
                iterations: 100,
                ..SinkhornConfig::default()
            },
        }
    }
}

/// Runs `trials` randomized instances of each oracle check (rank invariance
/// uses `trials / 10`, at least one when `trials > 0`).
pub fn run_verify(vcfg: &VerifyConfig, seed: u64) -> Result<VerifyReport> {
    vcfg.sinkhorn.validate()?;
    let trials = vcfg.trials;
    let root = RngState::new(seed);
    let mut ap = CheckCount {
        trials: 0,
        violations: 0,
    };
    let mut rng = root.fork(1);
    for _ in 0..trials {
        let n = 2 + rng.below(31);
        let sp = random_pair(&mut rng, n, true)?;
        let t = sp.target()[rng.below(sp.len())];
        ap.record(ap_loss_at_threshold(&sp, t)? == ap_brute_force(sp.online(), sp.target(), t));
    }

    let mut prop = CheckCount {
        trials: 0,
        violations: 0,
    };
    let mut worst = f64::NEG_INFINITY;
    let mut rng = root.fork(2);
    let gamma = |q: f64| (q - FUZZ_TAU1).max(0.0);
    for _ in 0..trials {
        let ties = rng.below(2) == 1;
        let n = 1 + rng.below(64);
        let sp = random_pair(&mut rng, n, ties)?;
        let exact = cotap_exact(&sp, gamma)?;
        let bound = cotap_bound_exact(&sp, &gamma_tilde_from_gamma(sp.target(), gamma))?;
        worst = worst.max(exact - bound);
        prop.record(exact <= bound + BOUND_SLACK);
    }

    let mut sk = CheckCount {
        trials: 0,
        violations: 0,
    };
    let mut rng = root.fork(3);
    let mut sk_worst: f64 = 0.0;
    for _ in 0..trials {
        let (b, d) = (2 + rng.below(63), 1 + rng.below(64));
        let logits = Matrix::new(b, d, rng.normal_vec(b * d, 1.0))?;
        let q = sinkhorn_normalize(&logits, &vcfg.sinkhorn)?;
        sk_worst = sk_worst.max(column_deviation(&q));
        sk.record(sinkhorn_marginals_ok(&q));
    }

    let mut inv = CheckCount {
        trials: 0,
        violations: 0,
    };
    let mut rng = root.fork(4);
    let inv_trials = if trials == 0 { 0 } else { (trials / 10).max(1) };
    for _ in 0..inv_trials {
        let (n, ties) = (2 + rng.below(63), rng.below(2) == 1);
        let sp = random_pair(&mut rng, n, ties)?;
        let gt = gamma_tilde_from_gamma(sp.target(), gamma);
        let base = cotap_bound_exact(&sp, &gt)?;
        let ok = MONOTONE_MAPS.iter().all(|f| {
            let p: Vec<f64> = sp.online().iter().map(|&x| f(x)).collect();
            ScorePair::new(p, sp.target().to_vec())
                .and_then(|s| cotap_bound_exact(&s, &gt))
                .is_ok_and(|v| v == base)
        });
        inv.record(ok);
    }

    let passed = [ap, prop, sk, inv].iter().all(|c| c.violations == 0);
    Ok(VerifyReport {
        seed,
        ap_oracle: ap,
        proposition_bound: prop,
        proposition_worst_gap: if worst.is_finite() { worst } else { 0.0 },
        sinkhorn_marginals: sk,
        sinkhorn_worst_column_dev: sk_worst,
        rank_invariance: inv,
        passed,
    })
}

/// Strictly increasing self-maps of `[0, 1]`.
pub const MONOTONE_MAPS: [fn(f64) -> f64; 3] = [|x| x * x * x, |x| x.sqrt(), |x| (x * 3.0).exp_m1() / 3f64.exp_m1()];

/// Scores on a coarse grid when `ties` is set so that equal values are common.
pub fn random_pair(rng: &mut RngState, n: usize, ties: bool) -> Result<ScorePair> {
    let draw = |rng: &mut RngState| {
        if ties {
            rng.below(9) as f64 / 8.0
        } else {
            rng.uniform()
        }
    };
    let p = (0..n).map(|_| draw(rng)).collect();
    let q = (0..n).map(|_| draw(rng)).collect();
    ScorePair::new(p, q)
}

/// Pairwise enumeration of the AP loss at threshold `t`; NaN without positives.
pub fn ap_brute_force(p: &[f64], q: &[f64], t: f64) -> f64 {
    let n = p.len();
    let mut sum = 0.0;
    let mut positives = 0usize;
    for i in 0..n {
        if q[i] < t {
            continue;
        }
        positives += 1;
        let (mut r_plus, mut r_minus) = (0usize, 0usize);
        for j in 0..n {
            if p[i] <= p[j] {
                if q[j] >= t {
                    r_plus += 1;
                } else {
                    r_minus += 1;
                }
            }
        }
        sum += r_minus as f64 / (r_plus + r_minus) as f64;
    }
    if positives == 0 {
        return f64::NAN;
    }
    sum / positives as f64
}

/// `max_c |Σ_r Q_rc − B/D|`.
pub fn column_deviation(q: &Matrix) -> f64 {
    let (b, d) = (q.rows(), q.cols());
    let target = b as f64 / d as f64;
    (0..d)
        .map(|c| ((0..b).map(|r| q.get(r, c)).sum::<f64>() - target).abs())
        .fold(0.0, f64::max)
}

/// Rows sum to 1 ± 1e-9 and, for B ≥ 2, columns to B/D ± 1e-6.
pub fn sinkhorn_marginals_ok(q: &Matrix) -> bool {
    let rows_ok = q.row_iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    rows_ok && (q.rows() < 2 || column_deviation(q) <= 1e-6)
}
