//! Two-branch self-distillation on the synthetic corpus.

mod encoder;
mod loss;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use encoder::{
    ema_update, encoder_backward, encoder_forward, Backbone, EncoderCache, EncoderConfig, EncoderOutput, EncoderParams,
    FilterParams, Linear,
};
pub use loss::{total_loss, Batch, BatchItem, LossBreakdown, LossConfig, LossWeights};

use crate::align::{sample_knn_positive, KnnTable};
use crate::error::{LabError, Result};
use crate::eval::{
    knn_vote_accuracy, overdispersion_metric, patch_centroids, patch_segmentation_accuracy, PatchEncoder,
};
use crate::numeric::{write_tensor, Matrix, RngState};
use crate::synth::{augment_view, AugmentConfig, AugmentParams, Dataset, View, WorldConfig};

/// Cosine ramp of the EMA coefficient from `beta0` to `beta1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmaSchedule {
    pub beta0: f64,
    pub beta1: f64,
}

impl Default for EmaSchedule {
    fn default() -> Self {
        Self {
            beta0: 0.99,
            beta1: 1.0,
        }
    }
}

impl EmaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta0) || !(self.beta0..=1.0).contains(&self.beta1) {
            return Err(LabError::ConfigError("EMA needs 0 <= beta0 <= beta1 <= 1".into()));
        }
        Ok(())
    }

    pub fn beta(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.beta0;
        }
        let t = step as f64 / (total - 1) as f64;
        self.beta1 - (self.beta1 - self.beta0) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub world: WorldConfig,
    pub seed: u64,
    pub global_aug: AugmentConfig,
    pub local_aug: AugmentConfig,
    pub local_views: usize,
    pub batch_size: usize,
    /// Scenes held out for downstream metrics.
    pub eval_scenes: usize,
    pub knn_k: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            seed: 0,
            global_aug: AugmentConfig::default(),
            local_aug: AugmentConfig::local(),
            local_views: 2,
            batch_size: 8,
            eval_scenes: 96,
            knn_k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSettings {
    pub steps: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    /// Fraction of steps trained with the alignment terms only.
    pub warmup_fraction: f64,
    /// `"sgd"` (plain descent) or `"adamw"`.
    pub optimizer: String,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for OptimSettings {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 0.5,
            min_lr: 0.0,
            weight_decay: 1e-4,
            warmup_fraction: 0.25,
            optimizer: "sgd".into(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl OptimSettings {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.lr;
        }
        let t = step as f64 / (self.steps - 1) as f64;
        self.min_lr + (self.lr - self.min_lr) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.steps as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoggingConfig {
    pub every: usize,
    /// Which features the downstream metrics read: `"dense"` or `"backbone"`.
    pub features: String,
}

impl Default for LoggingConfig {
    fn default() -> Self {
        Self {
            every: 50,
            features: "dense".into(),
        }
    }
}

/// Full training configuration; the TOML key tree mirrors these tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub losses: LossesSection,
    pub ema: EmaSchedule,
    pub optim: OptimSettings,
    pub logging: LoggingConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct LossesSection {
    pub weights: LossWeights,
    #[serde(flatten)]
    pub settings: LossConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.world.validate()?;
        self.encoder.validate()?;
        self.losses.weights.validate()?;
        self.losses.settings.validate()?;
        self.ema.validate()?;
        if self.data.batch_size == 0 || self.logging.every == 0 {
            return Err(LabError::ConfigError(
                "batch_size and logging.every must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.optim.warmup_fraction) || !(self.optim.lr >= 0.0) {
            return Err(LabError::ConfigError("invalid optimiser settings".into()));
        }
        if !matches!(self.optim.optimizer.as_str(), "sgd" | "adamw") {
            return Err(LabError::ConfigError(format!(
                "unknown optimizer {:?}",
                self.optim.optimizer
            )));
        }
        if !matches!(self.logging.features.as_str(), "dense" | "backbone") {
            return Err(LabError::ConfigError(format!(
                "unknown metric features {:?}",
                self.logging.features
            )));
        }
        if self.data.eval_scenes * 2 > self.data.world.n_scenes {
            return Err(LabError::ConfigError(
                "eval_scenes must leave at least half the corpus for training".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| LabError::ConfigError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Ablation rows: which of `L̄_align, L_align, L̄_sc, L_sc, OAF` are active.
    pub fn preset(name: &str) -> Result<Self> {
        let flags: [bool; 5] = match name {
            "line1" => [true, false, false, false, false],
            "line2" => [false, true, false, false, false],
            "line3" => [true, true, false, false, false],
            "line4" => [true, false, true, false, false],
            "line5" => [false, true, false, true, false],
            "line6" => [true, true, true, true, false],
            "line7" => [true, true, true, true, true],
            _ => return Err(LabError::ConfigError(format!("unknown preset {name:?}"))),
        };
        let on = |b: bool| if b { 1.0 } else { 0.0 };
        let mut cfg = Self::default();
        cfg.losses.weights = LossWeights {
            lambda1_bar: on(flags[0]),
            lambda1: on(flags[1]),
            lambda2_bar: on(flags[2]),
            lambda2: on(flags[3]),
            lambda3: on(flags[4]),
        };
        cfg.encoder.oaf = flags[4];
        Ok(cfg)
    }
}

pub const LOG_HEADER: &str =
    "step,loss_total,loss_align,loss_align_img,loss_sc,loss_sc_img,loss_proto,intra_class_cos,knn_patch_acc";

/// One logged training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: LossBreakdown,
    pub intra_class_cos: f64,
    pub knn_patch_acc: f64,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        let f = crate::theory::fmt_f64;
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            f(l.total),
            f(l.align),
            f(l.align_img),
            f(l.sc),
            f(l.sc_img),
            f(l.proto),
            f(self.intra_class_cos),
            f(self.knn_patch_acc)
        )
    }
}

/// Downstream metrics of an encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub intra_instance_cos: f64,
    pub intra_class_cos: f64,
    pub inter_class_cos: f64,
    pub knn_patch_acc: f64,
    pub knn_image_acc: f64,
}

/// Fixed evaluation views: identity views of held-out scenes, split into a
/// centroid reference half and a query half, plus object-centric CLS sets.
pub struct EvalSuite {
    reference: Vec<View>,
    query: Vec<View>,
    k_classes: usize,
    background: usize,
    image_ref: Vec<(View, usize)>,
    image_query: Vec<(View, usize)>,
    knn_k: usize,
}

fn identity_view(ds: &Dataset, i: usize) -> Result<View> {
    let s = &ds.scenes[i];
    augment_view(s, &AugmentParams::identity(s))
}

impl EvalSuite {
    pub fn new(ds: &Dataset, train: &[usize], eval: &[usize], knn_k: usize) -> Result<Self> {
        let views: Vec<View> = eval.iter().map(|&i| identity_view(ds, i)).collect::<Result<_>>()?;
        let half = views.len() / 2;
        let bg = ds.background();
        let labelled = |idx: &[usize]| -> Result<Vec<(View, usize)>> {
            idx.iter()
                .filter_map(|&i| ds.scenes[i].object_category(bg).map(|c| (i, c)))
                .map(|(i, c)| Ok((identity_view(ds, i)?, c)))
                .collect()
        };
        Ok(Self {
            query: views[half..].to_vec(),
            reference: views[..half].to_vec(),
            k_classes: ds.k() + 1,
            background: bg,
            image_ref: labelled(train)?,
            image_query: labelled(eval)?,
            knn_k,
        })
    }

    pub fn evaluate(&self, p: &EncoderParams, features: &str) -> Result<Metrics> {
        let enc: &dyn PatchEncoder = if features == "dense" { p } else { &Backbone(p) };
        let od = overdispersion_metric(enc, &self.query, self.background)?;
        let c = patch_centroids(enc, &self.reference, self.k_classes)?;
        let acc = patch_segmentation_accuracy(enc, &self.query, &c)?;
        let cls = |set: &[(View, usize)]| -> Result<(Matrix, Vec<usize>)> {
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for (v, c) in set {
                rows.push(encoder_forward(p, &v.features)?.0.cls);
                labels.push(*c);
            }
            Ok((Matrix::from_rows(&rows)?, labels))
        };
        let knn_image_acc = if self.image_ref.len() > self.knn_k && !self.image_query.is_empty() {
            let (r, rl) = cls(&self.image_ref)?;
            let (q, ql) = cls(&self.image_query)?;
            knn_vote_accuracy(&r, &rl, &q, &ql, self.knn_k)?
        } else {
            f64::NAN
        };
        Ok(Metrics {
            intra_instance_cos: od.intra_instance_cos,
            intra_class_cos: od.intra_class_cos,
            inter_class_cos: od.inter_class_cos,
            knn_patch_acc: acc,
            knn_image_acc,
        })
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub online: EncoderParams,
    pub target: EncoderParams,
    pub log: Vec<LogRow>,
    pub initial: Metrics,
    pub final_metrics: Metrics,
}

/// Deterministic split holding out `eval_scenes` indices spread evenly over the
/// corpus, so both object-centric and scene-centric scenes are represented.
pub fn split(ds: &Dataset, eval_scenes: usize) -> (Vec<usize>, Vec<usize>) {
    let n = ds.scenes.len();
    (0..n).partition(|&i| (i * eval_scenes) % n >= eval_scenes.min(n))
}

fn build_knn(ds: &Dataset, oc: &[usize], target: &EncoderParams, k: usize) -> Result<Option<KnnTable>> {
    if oc.len() <= k {
        return Ok(None);
    }
    let rows: Vec<Vec<f64>> = oc
        .iter()
        .map(|&i| Ok(encoder_forward(target, &identity_view(ds, i)?.features)?.0.cls))
        .collect::<Result<_>>()?;
    Ok(Some(KnnTable::build(&Matrix::from_rows(&rows)?, k)?))
}

fn sample_batch(
    ds: &Dataset,
    train: &[usize],
    oc: &[usize],
    knn: Option<&KnnTable>,
    cfg: &DataConfig,
    rng: &mut RngState,
) -> Result<Batch> {
    let mut order = train.to_vec();
    rng.shuffle(&mut order);
    let chosen = &order[..cfg.batch_size.min(order.len())];
    let b = chosen.len();
    let mut items = Vec::with_capacity(b);
    let offset = if b > 1 { 1 + rng.below(b - 1) } else { 0 };
    for (pos, &si) in chosen.iter().enumerate() {
        let scene = &ds.scenes[si];
        let mut views = Vec::with_capacity(2 + cfg.local_views);
        for _ in 0..2 {
            views.push(augment_view(scene, &cfg.global_aug.sample(rng))?);
        }
        for _ in 0..cfg.local_views {
            views.push(augment_view(scene, &cfg.local_aug.sample(rng))?);
        }
        let neighbor = match (knn, oc.binary_search(&si)) {
            (Some(t), Ok(row)) => {
                let nb = oc[sample_knn_positive(row, t, rng)?];
                Some(augment_view(&ds.scenes[nb], &cfg.global_aug.sample(rng))?)
            }
            _ => None,
        };
        items.push(BatchItem {
            views,
            object_centric: scene.object_centric,
            partner: (pos + offset) % b.max(1),
            neighbor,
        });
    }
    Ok(Batch { items })
}

/// First and second moment estimates of AdamW.
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamState {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Bias-corrected update direction for gradient `g`.
    fn direction(&mut self, g: &[f64], o: &OptimSettings) -> Vec<f64> {
        self.t += 1;
        let (b1, b2) = (o.adam_beta1, o.adam_beta2);
        let (c1, c2) = (1.0 - b1.powi(self.t), 1.0 - b2.powi(self.t));
        g.iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|(gi, (m, v))| {
                *m = b1 * *m + (1.0 - b1) * gi;
                *v = b2 * *v + (1.0 - b2) * gi * gi;
                (*m / c1) / ((*v / c2).sqrt() + o.adam_eps)
            })
            .collect()
    }
}

/// Runs the training loop. `on_log` receives every logged row as it is produced.
pub fn train(
    cfg: &TrainConfig,
    seed: u64,
    ds: &Dataset,
    mut on_log: impl FnMut(&LogRow) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let root = RngState::new(seed);
    let mut online = EncoderParams::random(&cfg.encoder, &mut root.fork(1))?;
    let mut target = online.clone();
    let (train_idx, eval_idx) = split(ds, cfg.data.eval_scenes);
    let oc: Vec<usize> = train_idx
        .iter()
        .copied()
        .filter(|&i| ds.scenes[i].object_centric)
        .collect();
    let suite = EvalSuite::new(ds, &train_idx, &eval_idx, cfg.data.knn_k)?;
    let feats = cfg.logging.features.as_str();
    let initial = suite.evaluate(&online, feats)?;
    let warmup = cfg.optim.warmup_steps();
    let mut knn: Option<KnnTable> = None;
    let mut log = Vec::new();
    let mut batch_rng = root.fork(2);
    let steps = cfg.optim.steps;
    let mut adam = (cfg.optim.optimizer == "adamw").then(|| AdamState::new(online.num_params()));
    for step in 0..steps {
        if step == warmup && cfg.losses.weights.lambda2_bar > 0.0 {
            knn = build_knn(ds, &oc, &target, cfg.data.knn_k)?;
        }
        let mut weights = cfg.losses.weights;
        if step < warmup {
            weights.lambda2 = 0.0;
            weights.lambda2_bar = 0.0;
        }
        if weights.validate().is_err() {
            // a concentration-only preset has nothing to optimise before warmup ends
            weights.lambda1 = 1.0;
        }
        let batch = sample_batch(ds, &train_idx, &oc, knn.as_ref(), &cfg.data, &mut batch_rng)?;
        let mut grad = online.zeros_like();
        let loss = match total_loss(
            &batch,
            &online,
            &target,
            &weights,
            &cfg.losses.settings,
            Some(&mut grad),
        ) {
            // degenerate features after an update mean the parameters ran off
            Err(LabError::DegenerateRow(_) | LabError::NumericalFailure(_)) if step > 0 => {
                return Err(LabError::TrainingDiverged { step })
            }
            r => r?,
        };
        if !loss.total.is_finite() || grad.flat().iter().any(|g| !g.is_finite()) {
            return Err(LabError::TrainingDiverged { step });
        }
        if step % cfg.logging.every == 0 || step + 1 == steps {
            let m = suite.evaluate(&online, feats)?;
            let row = LogRow {
                step,
                loss,
                intra_class_cos: m.intra_class_cos,
                knn_patch_acc: m.knn_patch_acc,
            };
            on_log(&row)?;
            log.push(row);
        }
        let lr = cfg.optim.lr_at(step);
        let decay = 1.0 - lr * cfg.optim.weight_decay;
        for b in online.buffers_mut() {
            b.iter_mut().for_each(|v| *v *= decay);
        }
        match adam.as_mut() {
            Some(st) => {
                let step_dir = st.direction(&grad.flat(), &cfg.optim);
                let mut flat = online.flat();
                flat.iter_mut().zip(&step_dir).for_each(|(p, d)| *p -= lr * d);
                online.set_flat(&flat)?;
            }
            None => online.add_scaled(&grad, -lr)?,
        }
        if online.buffers().iter().any(|b| b.iter().any(|v| !v.is_finite())) {
            return Err(LabError::TrainingDiverged { step });
        }
        target = ema_update(&target, &online, cfg.ema.beta(step, steps))?;
    }
    let final_metrics = suite.evaluate(&online, feats)?;
    Ok(TrainOutcome {
        online,
        target,
        log,
        initial,
        final_metrics,
    })
}

/// Generates the corpus described by `cfg.data` and trains on it.
pub fn train_default_corpus(cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    let ds = Dataset::generate(&cfg.data.world, cfg.data.seed)?;
    train(cfg, seed, &ds, |_| Ok(()))
}

pub fn write_log_csv<W: Write>(mut w: W, rows: &[LogRow]) -> Result<()> {
    writeln!(w, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.to_csv())?;
    }
    Ok(())
}

/// Writes `{stem}_online.bin`, `{stem}_target.bin` (flat parameter vectors) and
/// `{stem}.json` with the encoder configuration.
pub fn save_checkpoint(stem: &Path, online: &EncoderParams, target: &EncoderParams) -> Result<()> {
    let with = |suffix: &str| {
        let mut s = stem.as_os_str().to_owned();
        s.push(suffix);
        std::path::PathBuf::from(s)
    };
    let flat = |p: &EncoderParams| Matrix::new(1, p.num_params(), p.flat());
    write_tensor(&with("_online.bin"), &flat(online)?)?;
    write_tensor(&with("_target.bin"), &flat(target)?)?;
    std::fs::write(with(".json"), serde_json::to_string_pretty(&online.cfg)?)?;
    Ok(())
}

pub fn load_checkpoint(stem: &Path) -> Result<(EncoderParams, EncoderParams)> {
    let with = |suffix: &str| {
        let mut s = stem.as_os_str().to_owned();
        s.push(suffix);
        std::path::PathBuf::from(s)
    };
    let cfg: EncoderConfig = serde_json::from_str(&std::fs::read_to_string(with(".json"))?)?;
    let mut online = EncoderParams::random(&cfg, &mut RngState::new(0))?;
    let mut target = online.clone();
    online.set_flat(crate::numeric::read_tensor(&with("_online.bin"))?.data())?;
    target.set_flat(crate::numeric::read_tensor(&with("_target.bin"))?.data())?;
    Ok((online, target))
}
