//! Toy patch encoder: per-patch `tanh` projection, optional object-aware
//! filter, three-layer projector and L2 normalisation, with a CLS analog built
//! from the mean-pooled pre-projector features.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, LabError, Result};
use crate::eval::PatchEncoder;
use crate::numeric::{dot, l2_normalize, normalize_backward, FeatureGrid, Matrix, RngState};
use crate::oaf::{
    prototype_filter_backward, prototype_filter_forward, AttentionWeights, FilterCache, FilterGrads, PrototypeBank,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    /// Backbone feature dimension `D`.
    pub dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub oaf: bool,
    pub prototypes: usize,
    pub proto_ks: usize,
    /// Attention value/query dimension `D′`.
    pub attn_dim: usize,
    pub tau3: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: crate::synth::CHANNELS,
            dim: 16,
            hidden: 32,
            out_dim: 32,
            oaf: false,
            prototypes: 8,
            proto_ks: 2,
            attn_dim: 8,
            tau3: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.dim == 0 || self.hidden == 0 || self.out_dim == 0 {
            return Err(LabError::ConfigError("encoder dimensions must be positive".into()));
        }
        if self.oaf && (self.prototypes == 0 || self.proto_ks == 0 || self.attn_dim == 0 || !(self.tau3 > 0.0)) {
            return Err(LabError::ConfigError("invalid object-aware filter settings".into()));
        }
        Ok(())
    }

    fn projector_input(&self) -> usize {
        if self.oaf {
            self.dim + self.attn_dim
        } else {
            self.dim
        }
    }
}

/// Affine map `y = W x + b` with `W` of shape `out×in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl Linear {
    fn random(inp: usize, out: usize, rng: &mut RngState) -> Self {
        let std = 1.0 / (inp as f64).sqrt();
        Self {
            w: Matrix::new(out, inp, rng.normal_vec(out * inp, std)).expect("shape"),
            b: vec![0.0; out],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.w.row_iter().zip(&self.b).map(|(r, b)| dot(r, x) + b).collect()
    }

    /// Accumulates parameter gradients and returns `Wᵀ g`.
    fn backward(&self, x: &[f64], g: &[f64], grads: &mut Linear) -> Vec<f64> {
        let mut gx = vec![0.0; x.len()];
        let cols = x.len();
        let gw = grads.w.data_mut();
        for (o, (gi, row)) in g.iter().zip(self.w.row_iter()).enumerate() {
            grads.b[o] += gi;
            if *gi == 0.0 {
                continue;
            }
            for ((dst, xv), (gxv, wv)) in gw[o * cols..(o + 1) * cols]
                .iter_mut()
                .zip(x)
                .zip(gx.iter_mut().zip(row))
            {
                *dst += gi * xv;
                *gxv += gi * wv;
            }
        }
        gx
    }
}

/// Object-aware filter parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterParams {
    pub bank: PrototypeBank,
    pub attn: AttentionWeights,
}

/// All learnable tensors of one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub cfg: EncoderConfig,
    pub embed: Linear,
    pub filter: Option<FilterParams>,
    pub proj: [Linear; 3],
}

impl EncoderParams {
    pub fn random(cfg: &EncoderConfig, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let embed = Linear::random(cfg.input_dim, cfg.dim, rng);
        let filter = if cfg.oaf {
            let bank = PrototypeBank::random(cfg.prototypes, cfg.proto_ks, cfg.dim, cfg.tau3, rng)?;
            let attn = AttentionWeights::random(cfg.dim, cfg.attn_dim, rng);
            Some(FilterParams { bank, attn })
        } else {
            None
        };
        let p = cfg.projector_input();
        let proj = [
            Linear::random(p, cfg.hidden, rng),
            Linear::random(cfg.hidden, cfg.hidden, rng),
            Linear::random(cfg.hidden, cfg.out_dim, rng),
        ];
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            filter,
            proj,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.buffers_mut().into_iter().for_each(|b| b.fill(0.0));
        z
    }

    pub fn buffers(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.embed.w.data(), &self.embed.b];
        if let Some(f) = &self.filter {
            out.extend([
                f.bank.values.data(),
                f.attn.wq.data(),
                f.attn.wk.data(),
                f.attn.wv.data(),
            ]);
        }
        for l in &self.proj {
            out.extend([l.w.data(), &l.b[..]]);
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.embed.w.data_mut(), &mut self.embed.b];
        if let Some(f) = &mut self.filter {
            out.push(f.bank.values.data_mut());
            out.push(f.attn.wq.data_mut());
            out.push(f.attn.wk.data_mut());
            out.push(f.attn.wv.data_mut());
        }
        for l in &mut self.proj {
            let Linear { w, b } = l;
            out.push(w.data_mut());
            out.push(b);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.buffers().iter().map(|b| b.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.buffers().concat()
    }

    pub fn set_flat(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.num_params() {
            return Err(shape_err(format!(
                "{} values for {} parameters",
                v.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for b in self.buffers_mut() {
            let n = b.len();
            b.copy_from_slice(&v[off..off + n]);
            off += n;
        }
        Ok(())
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        let a: Vec<usize> = self.buffers().iter().map(|b| b.len()).collect();
        let b: Vec<usize> = other.buffers().iter().map(|b| b.len()).collect();
        if a != b {
            return Err(shape_err("encoder parameter layouts differ"));
        }
        Ok(())
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) -> Result<()> {
        self.check_same(other)?;
        for (d, s) in self.buffers_mut().into_iter().zip(other.buffers()) {
            d.iter_mut().zip(s).for_each(|(a, b)| *a += scale * b);
        }
        Ok(())
    }
}

/// `θ_t ← β θ_t + (1 − β) θ_o`.
pub fn ema_update(target: &EncoderParams, online: &EncoderParams, beta: f64) -> Result<EncoderParams> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(LabError::ConfigError(format!("EMA beta {beta} outside [0, 1]")));
    }
    target.check_same(online)?;
    let mut out = target.clone();
    for (d, s) in out.buffers_mut().into_iter().zip(online.buffers()) {
        d.iter_mut().zip(s).for_each(|(a, b)| *a = beta * *a + (1.0 - beta) * b);
    }
    Ok(out)
}

struct ProjCache {
    x: Vec<f64>,
    y1: Vec<f64>,
    y2: Vec<f64>,
    norm: f64,
}

fn tanh_vec(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(f64::tanh).collect()
}

fn project(p: &EncoderParams, x: &[f64]) -> Result<(Vec<f64>, ProjCache)> {
    let y1 = tanh_vec(p.proj[0].apply(x));
    let y2 = tanh_vec(p.proj[1].apply(&y1));
    let mut o = p.proj[2].apply(&y2);
    let norm = l2_normalize(&mut o).ok_or(LabError::DegenerateRow(0))?;
    Ok((
        o,
        ProjCache {
            x: x.to_vec(),
            y1,
            y2,
            norm,
        },
    ))
}

fn project_backward(p: &EncoderParams, c: &ProjCache, z: &[f64], g_z: &[f64], grads: &mut EncoderParams) -> Vec<f64> {
    let g_o = normalize_backward(z, c.norm, g_z);
    let [g0, g1, g2] = &mut grads.proj;
    let g_y2 = p.proj[2].backward(&c.y2, &g_o, g2);
    let g_a2: Vec<f64> = g_y2.iter().zip(&c.y2).map(|(g, y)| g * (1.0 - y * y)).collect();
    let g_y1 = p.proj[1].backward(&c.y1, &g_a2, g1);
    let g_a1: Vec<f64> = g_y1.iter().zip(&c.y1).map(|(g, y)| g * (1.0 - y * y)).collect();
    p.proj[0].backward(&c.x, &g_a1, g0)
}

/// Encoder outputs for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// Normalised per-patch embeddings.
    pub dense: FeatureGrid,
    /// Normalised image-level embedding.
    pub cls: Vec<f64>,
    /// Backbone features before the filter and projector.
    pub backbone: FeatureGrid,
}

/// Forward state for [`encoder_backward`].
pub struct EncoderCache {
    input: FeatureGrid,
    filtered: FeatureGrid,
    filter: Option<FilterCache>,
    patches: Vec<ProjCache>,
    cls: ProjCache,
}

pub fn encoder_forward(p: &EncoderParams, view: &FeatureGrid) -> Result<(EncoderOutput, EncoderCache)> {
    if view.dim() != p.cfg.input_dim {
        return Err(shape_err(format!(
            "view has {} channels, encoder expects {}",
            view.dim(),
            p.cfg.input_dim
        )));
    }
    let n = view.num_patches();
    let mut h = Vec::with_capacity(n * p.cfg.dim);
    for i in 0..n {
        h.extend(tanh_vec(p.embed.apply(view.patch(i))));
    }
    let backbone = FeatureGrid::new(view.height(), view.width(), p.cfg.dim, h)?;
    let (filtered, filter) = match &p.filter {
        Some(f) => {
            let (g, c) = prototype_filter_forward(&backbone, &f.bank, &f.attn)?;
            (g, Some(c))
        }
        None => (backbone.clone(), None),
    };
    let pd = filtered.dim();
    let mut dense = Vec::with_capacity(n * p.cfg.out_dim);
    let mut patches = Vec::with_capacity(n);
    let mut pool = vec![0.0; pd];
    for i in 0..n {
        let x = filtered.patch(i);
        pool.iter_mut().zip(x).for_each(|(a, b)| *a += b / n as f64);
        let (z, c) = project(p, x).map_err(|_| LabError::DegenerateRow(i))?;
        dense.extend(z);
        patches.push(c);
    }
    let (cls, cls_cache) = project(p, &pool)?;
    let dense = FeatureGrid::new(view.height(), view.width(), p.cfg.out_dim, dense)?.assume_normalized()?;
    Ok((
        EncoderOutput { dense, cls, backbone },
        EncoderCache {
            input: view.clone(),
            filtered,
            filter,
            patches,
            cls: cls_cache,
        },
    ))
}

/// Accumulates parameter gradients given `dL/d dense` and `dL/d cls`.
pub fn encoder_backward(
    p: &EncoderParams,
    out: &EncoderOutput,
    cache: &EncoderCache,
    grad_dense: Option<&[f64]>,
    grad_cls: Option<&[f64]>,
    grads: &mut EncoderParams,
) -> Result<()> {
    let n = cache.input.num_patches();
    let pd = cache.filtered.dim();
    let od = p.cfg.out_dim;
    let mut g_filtered = vec![0.0; n * pd];
    if let Some(gd) = grad_dense {
        if gd.len() != n * od {
            return Err(shape_err("dense gradient length"));
        }
        for i in 0..n {
            let g = &gd[i * od..(i + 1) * od];
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            let gx = project_backward(p, &cache.patches[i], out.dense.patch(i), g, grads);
            g_filtered[i * pd..(i + 1) * pd]
                .iter_mut()
                .zip(gx)
                .for_each(|(a, b)| *a += b);
        }
    }
    if let Some(gc) = grad_cls {
        if gc.len() != od {
            return Err(shape_err("cls gradient length"));
        }
        let g_pool = project_backward(p, &cache.cls, &out.cls, gc, grads);
        for i in 0..n {
            g_filtered[i * pd..(i + 1) * pd]
                .iter_mut()
                .zip(&g_pool)
                .for_each(|(a, b)| *a += b / n as f64);
        }
    }
    let g_h = match (&p.filter, &cache.filter) {
        (Some(f), Some(fc)) => {
            let gf = grads.filter.as_mut().expect("gradient layout mirrors parameters");
            let mut fg = FilterGrads::zeros(n, &f.bank, &f.attn);
            prototype_filter_backward(&out.backbone, &f.bank, &f.attn, fc, &g_filtered, &mut fg)?;
            for (dst, src) in [
                (gf.bank.values.data_mut(), &fg.bank),
                (gf.attn.wq.data_mut(), &fg.wq),
                (gf.attn.wk.data_mut(), &fg.wk),
                (gf.attn.wv.data_mut(), &fg.wv),
            ] {
                dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
            fg.h
        }
        _ => g_filtered,
    };
    let d = p.cfg.dim;
    for i in 0..n {
        let h = out.backbone.patch(i);
        let g_a: Vec<f64> = g_h[i * d..(i + 1) * d]
            .iter()
            .zip(h)
            .map(|(g, y)| g * (1.0 - y * y))
            .collect();
        p.embed.backward(cache.input.patch(i), &g_a, &mut grads.embed);
    }
    Ok(())
}

impl PatchEncoder for EncoderParams {
    fn encode(&self, view: &FeatureGrid) -> Result<FeatureGrid> {
        Ok(encoder_forward(self, view)?.0.dense)
    }
}

/// Evaluates an encoder on its backbone features instead of the projector output.
#[derive(Debug, Clone, Copy)]
pub struct Backbone<'a>(pub &'a EncoderParams);

impl PatchEncoder for Backbone<'_> {
    fn encode(&self, view: &FeatureGrid) -> Result<FeatureGrid> {
        Ok(encoder_forward(self.0, view)?.0.backbone)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_gradient, gradient_report};

    fn view(rng: &mut RngState, h: usize, w: usize) -> FeatureGrid {
        FeatureGrid::new(
            h,
            w,
            crate::synth::CHANNELS,
            rng.normal_vec(h * w * crate::synth::CHANNELS, 1.0),
        )
        .unwrap()
    }

    fn small_cfg(oaf: bool) -> EncoderConfig {
        EncoderConfig {
            dim: 4,
            hidden: 5,
            out_dim: 3,
            oaf,
            prototypes: 2,
            proto_ks: 1,
            attn_dim: 2,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn zero_weights_degenerate() {
        let mut rng = RngState::new(0);
        let mut p = EncoderParams::random(&EncoderConfig::default(), &mut rng).unwrap();
        p.buffers_mut().into_iter().for_each(|b| b.fill(0.0));
        assert!(matches!(
            encoder_forward(&p, &view(&mut rng, 2, 2)),
            Err(LabError::DegenerateRow(_))
        ));
    }

    #[test]
    fn patch_permutation_equivariance() {
        let mut rng = RngState::new(1);
        for oaf in [false, true] {
            let p = EncoderParams::random(&small_cfg(oaf), &mut rng).unwrap();
            let v = view(&mut rng, 1, 3);
            let perm = [2usize, 0, 1];
            let mut pv = v.clone();
            for (dst, &src) in perm.iter().enumerate() {
                pv.patch_mut(dst).copy_from_slice(v.patch(src));
            }
            let a = encoder_forward(&p, &v).unwrap().0;
            let b = encoder_forward(&p, &pv).unwrap().0;
            for (dst, &src) in perm.iter().enumerate() {
                assert_eq!(b.dense.patch(dst), a.dense.patch(src));
            }
            for (x, y) in a.cls.iter().zip(&b.cls) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = RngState::new(2);
        for oaf in [false, true] {
            let p = EncoderParams::random(&small_cfg(oaf), &mut rng).unwrap();
            let v = view(&mut rng, 2, 2);
            let wd = rng.normal_vec(4 * 3, 1.0);
            let wc = rng.normal_vec(3, 1.0);
            let f = |q: &EncoderParams| {
                let o = encoder_forward(q, &v).unwrap().0;
                dot(o.dense.data(), &wd) + dot(&o.cls, &wc)
            };
            let (out, cache) = encoder_forward(&p, &v).unwrap();
            let mut g = p.zeros_like();
            encoder_backward(&p, &out, &cache, Some(&wd), Some(&wc), &mut g).unwrap();
            let mut probe = p.clone();
            let num = finite_diff_gradient(
                |x| {
                    probe.set_flat(x).unwrap();
                    f(&probe)
                },
                &p.flat(),
                1e-6,
            )
            .unwrap();
            assert!(gradient_report(&g.flat(), &num).unwrap() < 1e-5, "oaf={oaf}");
        }
    }

    #[test]
    fn ema_endpoints() {
        let mut rng = RngState::new(3);
        let a = EncoderParams::random(&small_cfg(true), &mut rng).unwrap();
        let b = EncoderParams::random(&small_cfg(true), &mut rng).unwrap();
        assert_eq!(ema_update(&a, &b, 1.0).unwrap(), a);
        assert_eq!(ema_update(&a, &b, 0.0).unwrap(), b);
        let mid = ema_update(&a, &b, 0.5).unwrap().flat();
        for ((m, x), y) in mid.iter().zip(a.flat()).zip(b.flat()) {
            assert_eq!(*m, 0.5 * x + 0.5 * y);
        }
        assert!(ema_update(&a, &b, 1.5).is_err());
        let other = EncoderParams::random(&small_cfg(false), &mut rng).unwrap();
        assert!(matches!(ema_update(&a, &other, 0.5), Err(LabError::ShapeError(_))));
    }
}
