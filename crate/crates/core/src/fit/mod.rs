//! Fitting scene appearance (and optionally geometry and the fusion MLP) to
//! posed target images.
//!
//! Each iteration renders a budget of rays as square patches, scores them
//! with [`composite_loss`] and takes one Adam step. Appearance gradients are
//! analytic through the compositing sum; geometry gradients use central
//! differences since hit order changes discontinuously with position.
//!
//! Parameters are optimized in an unconstrained space:
//!
//! | value   | raw parameter          |
//! |---------|------------------------|
//! | alpha   | logit                  |
//! | l_iso   | logit                  |
//! | l_aniso | inverse softplus       |
//! | g       | atanh                  |
//! | cov     | log eigenvalues (eigenvectors fixed) |

mod adam;
mod loss;

use std::collections::BTreeSet;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::composite_loss;

use crate::anchor::{depth_gradient, sample_anchor_indices, select_anchors, AnchorSet};
use crate::camera::{Camera, Ray};
use crate::error::{argument, Error, Result};
use crate::fusion::{embed_camera, fuse, fuse_backward_accumulate, fusion_input, render_fused, CameraEmbedding, MlpParams};
use crate::image::{ImageBuffer, ImageKind};
use crate::metrics::{psnr, ssim, SsimConfig};
use crate::render::{normalized_phase_dg, render, shade_hits, PreparedScene, RayHit, RaySample, RenderConfig};
use crate::scene::{Gaussian, Mat3, Scene, Vec3};

/// Appearance parameters per primitive: alpha, l_iso (3), l_aniso (3), g.
pub const APPEARANCE_PARAMS: usize = 8;
/// Geometry parameters per primitive: mu (3), log eigenvalues (3).
pub const GEOMETRY_PARAMS: usize = 6;

const SIGMOID_RAW_LIMIT: f64 = 30.0;
const TANH_RAW_LIMIT: f64 = 18.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoAnchoring,
    NoDisentangle,
    NoDualBranch,
    NoAnisotropy,
}

impl Ablation {
    pub const ALL: [Ablation; 4] =
        [Ablation::NoAnchoring, Ablation::NoDisentangle, Ablation::NoDualBranch, Ablation::NoAnisotropy];

    pub fn name(&self) -> &'static str {
        match self {
            Ablation::NoAnchoring => "no_anchoring",
            Ablation::NoDisentangle => "no_disentangle",
            Ablation::NoDualBranch => "no_dual_branch",
            Ablation::NoAnisotropy => "no_anisotropy",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| argument(format!("unknown ablation {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon_adam: f64,
    pub lr_halve_every: u64,
    pub iters: usize,
    pub lambda_mse: f64,
    pub lambda_ssim: f64,
    /// Perceptual loss weight. Any non-zero value is rejected: no perceptual
    /// network is bundled.
    pub lambda_lpips: f64,
    pub optimize_geometry: bool,
    pub ablation: BTreeSet<Ablation>,
    pub seed: u64,
    /// Rays rendered per iteration, spent as square patches.
    pub ray_budget: usize,
    pub patch_size: usize,
    /// Share of patches centered on anchors; the rest are uniform.
    pub anchor_fraction: f64,
    pub anchor_k: usize,
    pub anchor_beta: f64,
    pub anchor_radius: f64,
    /// Full-image loss (and anchor refresh) period, in iterations.
    pub trace_every: usize,
    pub geometry_fd_step: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon_adam: 1e-8,
            lr_halve_every: 50_000,
            iters: 1000,
            lambda_mse: 1.0,
            lambda_ssim: 0.2,
            lambda_lpips: 0.0,
            optimize_geometry: false,
            ablation: BTreeSet::new(),
            seed: 0,
            ray_budget: 4096,
            patch_size: 16,
            anchor_fraction: 0.5,
            anchor_k: crate::anchor::DEFAULT_K,
            anchor_beta: 1.0,
            anchor_radius: crate::anchor::DEFAULT_SUPPRESSION_RADIUS,
            trace_every: 100,
            geometry_fd_step: 1e-4,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_lpips != 0.0 {
            return Err(Error::Unsupported(
                "LPIPS needs a pretrained perceptual network, which is not available; use lambda_mse/lambda_ssim".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(argument("lr must be positive"));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(argument("beta1 and beta2 must lie in (0, 1)"));
        }
        if !(self.lambda_mse >= 0.0 && self.lambda_ssim >= 0.0) {
            return Err(argument("loss weights must be non-negative"));
        }
        if self.lambda_ssim > 0.0 && self.patch_size < SsimConfig::default().window {
            return Err(argument("patch_size must be at least the SSIM window when lambda_ssim > 0"));
        }
        if self.ray_budget == 0 || self.patch_size == 0 || self.trace_every == 0 {
            return Err(argument("ray_budget, patch_size and trace_every must be positive"));
        }
        if !(0.0..=1.0).contains(&self.anchor_fraction) {
            return Err(argument("anchor_fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon_adam,
            lr_halve_every: self.lr_halve_every,
        }
    }

    pub fn has(&self, a: Ablation) -> bool {
        self.ablation.contains(&a)
    }

    /// Render configuration with the renderer-side ablations applied.
    pub fn effective_render_config(&self, base: &RenderConfig) -> RenderConfig {
        let mut cfg = *base;
        if self.has(Ablation::NoDisentangle) {
            cfg.disentangle = false;
        }
        if self.has(Ablation::NoAnisotropy) {
            cfg.anisotropy_enabled = false;
        }
        cfg
    }
}

/// A posed target view.
#[derive(Debug, Clone)]
pub struct FitTarget {
    pub camera: Camera,
    pub image: ImageBuffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FitReport {
    pub iterations: usize,
    /// Patch-batch loss of every iteration.
    pub loss_trace: Vec<f64>,
    /// Full-image mean loss every `trace_every` iterations.
    pub full_loss_trace: Vec<TracePoint>,
    pub final_loss: f64,
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub seconds: f64,
    pub ablation: Vec<Ablation>,
    pub parameters: usize,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub scene: Scene,
    pub mlp: Option<MlpParams>,
    pub report: FitReport,
}

#[derive(Debug, Error)]
pub enum FitError {
    #[error(transparent)]
    Setup(#[from] Error),
    #[error("loss became non-finite at iteration {iteration}")]
    NonFinite { iteration: usize, report: Box<FitReport> },
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Per-view data that stays fixed while geometry is fixed.
struct ViewData {
    camera: Camera,
    target: ImageBuffer,
    rays: Vec<Ray>,
    near: f64,
    /// Sorted hits per pixel; `None` when geometry is being optimized.
    hits: Option<Vec<Vec<RayHit>>>,
    embedding: Option<CameraEmbedding>,
    anchors: Option<AnchorSet>,
}

#[derive(Debug, Clone, Copy)]
struct Patch {
    view: usize,
    row: usize,
    col: usize,
    h: usize,
    w: usize,
}

struct BatchResult {
    loss: f64,
    appearance: Vec<f64>,
    mlp: Option<MlpParams>,
}

struct Evaluator<'a> {
    scene: &'a Scene,
    views: &'a [ViewData],
    rcfg: RenderConfig,
    mlp: Option<&'a MlpParams>,
    lambda_mse: f64,
    lambda_ssim: f64,
}

impl Evaluator<'_> {
    fn patch(&self, prepared: Option<&PreparedScene<'_>>, p: &Patch, want_grad: bool) -> Result<BatchResult> {
        let view = &self.views[p.view];
        let gs = self.scene.gaussians();
        let bg = self.scene.background;
        let mut pred = ImageBuffer::new(p.w, p.h, 3, ImageKind::Radiance);
        let n_px = p.w * p.h;
        let mut owned_hits: Vec<Vec<RayHit>> = Vec::new();
        let mut samples: Vec<Vec<RaySample>> = Vec::with_capacity(n_px);
        let mut sums: Vec<(Vec3, Vec3)> = Vec::with_capacity(n_px);
        for r in 0..p.h {
            for c in 0..p.w {
                let (row, col) = (p.row + r, p.col + c);
                let pix = row * view.camera.width + col;
                let hits: &[RayHit] = match &view.hits {
                    Some(h) => &h[pix],
                    None => {
                        let prepared = prepared.expect("prepared scene when hits are not cached");
                        let mut h = Vec::new();
                        prepared.gather_hits(&view.rays[pix], view.near, 0..gs.len(), &mut h)?;
                        owned_hits.push(h);
                        owned_hits.last().unwrap()
                    }
                };
                let mut s = Vec::new();
                let res = shade_hits(hits, gs, &bg, &self.rcfg, Some(&mut s));
                let color = match (self.mlp, &view.embedding) {
                    (Some(mlp), Some(e)) => fuse(&res.iso_sum, &res.aniso_sum, e, &view.rays[pix].dir, mlp)?,
                    _ => res.color,
                };
                for ch in 0..3 {
                    pred.set(r, c, ch, color[ch]);
                }
                samples.push(s);
                sums.push((res.iso_sum, res.aniso_sum));
            }
        }
        let target = view.target.crop(p.row, p.col, p.h, p.w);
        let (loss, grad) = composite_loss(&pred, &target, self.lambda_mse, self.lambda_ssim)?;
        if !want_grad {
            return Ok(BatchResult { loss, appearance: Vec::new(), mlp: None });
        }

        let mut appearance = vec![0.0; APPEARANCE_PARAMS * gs.len()];
        let mut mlp_grad = self.mlp.map(|m| m.zeros_like());
        let phase_live = self.rcfg.anisotropy_enabled && self.rcfg.disentangle;
        let mut owned = owned_hits.iter();
        for r in 0..p.h {
            for c in 0..p.w {
                let k = r * p.w + c;
                let pix = (p.row + r) * view.camera.width + p.col + c;
                let hits: &[RayHit] = match &view.hits {
                    Some(h) => &h[pix],
                    None => owned.next().unwrap(),
                };
                let u = Vec3::new(grad.get(r, c, 0), grad.get(r, c, 1), grad.get(r, c, 2));
                let (u_iso, u_an) = match (self.mlp, &view.embedding, mlp_grad.as_mut()) {
                    (Some(mlp), Some(e), Some(mg)) => {
                        let x = fusion_input(&sums[k].0, &sums[k].1, e, &view.rays[pix].dir);
                        let ig = fuse_backward_accumulate(&x, mlp, &u, mg)?;
                        (Vec3::new(ig[0], ig[1], ig[2]), Vec3::new(ig[3], ig[4], ig[5]))
                    }
                    _ => (u, u),
                };
                if u_iso == Vec3::zeros() && u_an == Vec3::zeros() {
                    continue;
                }
                let mut r_iso = bg;
                let mut r_an = Vec3::zeros();
                for (hit, s) in hits.iter().zip(&samples[k]).rev() {
                    let g = &gs[hit.index];
                    let (w, t) = (s.weight, s.transmittance_before);
                    let f = self.rcfg.anisotropy_factor(hit.cos_theta, g.g);
                    let c_an = g.l_aniso * f;
                    let dw = t * ((g.l_iso - r_iso).dot(&u_iso) + (c_an - r_an).dot(&u_an));
                    let base = APPEARANCE_PARAMS * hit.index;
                    let raw_w = g.alpha * hit.kernel;
                    if raw_w > 0.0 && raw_w <= 1.0 {
                        appearance[base] += dw * hit.kernel;
                    }
                    let tw = t * w;
                    for ch in 0..3 {
                        appearance[base + 1 + ch] += tw * u_iso[ch];
                        appearance[base + 4 + ch] += tw * f * u_an[ch];
                    }
                    if phase_live {
                        appearance[base + 7] += tw * g.l_aniso.dot(&u_an) * normalized_phase_dg(hit.cos_theta, g.g);
                    }
                    r_iso = g.l_iso * w + r_iso * (1.0 - w);
                    r_an = c_an * w + r_an * (1.0 - w);
                }
            }
        }
        Ok(BatchResult { loss, appearance, mlp: mlp_grad })
    }

    /// Mean loss (and gradients) over patches, merged in patch order.
    fn batch(&self, patches: &[Patch], want_grad: bool) -> Result<BatchResult> {
        let uncached = self.views.iter().any(|v| v.hits.is_none());
        let prepared = if uncached { Some(PreparedScene::new(self.scene, &self.rcfg)?) } else { None };
        let parts: Vec<Result<BatchResult>> =
            patches.par_iter().map(|p| self.patch(prepared.as_ref(), p, want_grad)).collect();
        let inv = 1.0 / patches.len() as f64;
        let mut out = BatchResult {
            loss: 0.0,
            appearance: if want_grad { vec![0.0; APPEARANCE_PARAMS * self.scene.len()] } else { Vec::new() },
            mlp: if want_grad { self.mlp.map(|m| m.zeros_like()) } else { None },
        };
        for part in parts {
            let part = part?;
            out.loss += part.loss * inv;
            if want_grad {
                out.appearance.iter_mut().zip(&part.appearance).for_each(|(a, b)| *a += b * inv);
                if let (Some(acc), Some(g)) = (out.mlp.as_mut(), part.mlp.as_ref()) {
                    for (la, lg) in acc.layers.iter_mut().zip(&g.layers) {
                        la.weights.iter_mut().zip(&lg.weights).for_each(|(a, b)| *a += b * inv);
                        la.biases.iter_mut().zip(&lg.biases).for_each(|(a, b)| *a += b * inv);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn build_views(
    scene: &Scene,
    targets: &[FitTarget],
    rcfg: &RenderConfig,
    cache_hits: bool,
    mlp_active: bool,
    d: usize,
) -> Result<Vec<ViewData>> {
    let prepared = if cache_hits { Some(PreparedScene::new(scene, rcfg)?) } else { None };
    targets
        .iter()
        .map(|t| {
            let cam = &t.camera;
            cam.validate()?;
            if t.image.width != cam.width || t.image.height != cam.height || t.image.channels != 3 {
                return Err(argument(format!(
                    "target image {}x{}x{} does not match camera {}x{}x3",
                    t.image.width, t.image.height, t.image.channels, cam.width, cam.height
                )));
            }
            let rays: Vec<Ray> = (0..cam.height)
                .flat_map(|r| (0..cam.width).map(move |c| (r, c)))
                .map(|(r, c)| cam.pixel_ray(r, c))
                .collect();
            let near = rcfg.near.max(cam.near);
            let hits = match &prepared {
                Some(p) => Some(
                    rays.par_iter()
                        .map(|ray| p.hits(ray, near))
                        .collect::<Result<Vec<_>>>()?,
                ),
                None => None,
            };
            let embedding =
                if mlp_active { Some(embed_camera(cam, &scene.center(), scene.radius(), d)?) } else { None };
            Ok(ViewData { camera: cam.clone(), target: t.image.clone(), rays, near, hits, embedding, anchors: None })
        })
        .collect()
}

fn full_patches(views: &[ViewData]) -> Vec<Patch> {
    views
        .iter()
        .enumerate()
        .map(|(i, v)| Patch { view: i, row: 0, col: 0, h: v.camera.height, w: v.camera.width })
        .collect()
}

/// Mean full-image composite loss over `targets` and its gradient with
/// respect to each primitive's appearance values
/// `[alpha, l_iso (3), l_aniso (3), g]`.
pub fn appearance_loss_and_gradient(
    scene: &Scene,
    targets: &[FitTarget],
    cfg: &FitConfig,
    render_cfg: &RenderConfig,
) -> Result<(f64, Vec<f64>)> {
    let rcfg = cfg.effective_render_config(render_cfg);
    let views = build_views(scene, targets, &rcfg, true, false, 0)?;
    let eval = Evaluator {
        scene,
        views: &views,
        rcfg,
        mlp: None,
        lambda_mse: cfg.lambda_mse,
        lambda_ssim: cfg.lambda_ssim,
    };
    let out = eval.batch(&full_patches(&views), true)?;
    Ok((out.loss, out.appearance))
}

/// Raw-parameter bookkeeping for one fit.
struct ParamLayout {
    n: usize,
    geometry: bool,
    mlp: usize,
    /// Eigenvectors held fixed while log-eigenvalues move.
    eigvecs: Vec<Mat3>,
}

impl ParamLayout {
    fn geometry_offset(&self) -> usize {
        APPEARANCE_PARAMS * self.n
    }

    fn mlp_offset(&self) -> usize {
        self.geometry_offset() + if self.geometry { GEOMETRY_PARAMS * self.n } else { 0 }
    }

    fn len(&self) -> usize {
        self.mlp_offset() + self.mlp
    }

    fn encode(&self, scene: &Scene, mlp: Option<&MlpParams>) -> Vec<f64> {
        let mut raw = Vec::with_capacity(self.len());
        for g in scene.gaussians() {
            raw.push(logit(g.alpha.clamp(1e-6, 1.0 - 1e-6)));
            raw.extend(g.l_iso.iter().map(|v| logit(v.clamp(1e-6, 1.0 - 1e-6))));
            raw.extend(g.l_aniso.iter().map(|v| softplus_inv(v.max(1e-9))));
            raw.push(g.g.clamp(-1.0 + 1e-9, 1.0 - 1e-9).atanh());
        }
        if self.geometry {
            for g in scene.gaussians() {
                raw.extend(g.mu.iter());
                let eig = SymmetricEigen::new(g.cov);
                raw.extend(eig.eigenvalues.iter().map(|v| v.ln()));
            }
        }
        if let Some(m) = mlp {
            raw.extend(m.to_flat());
        }
        raw
    }

    fn clamp_raw(&self, raw: &mut [f64]) {
        for i in 0..self.n {
            let b = APPEARANCE_PARAMS * i;
            for j in 0..4 {
                raw[b + j] = raw[b + j].clamp(-SIGMOID_RAW_LIMIT, SIGMOID_RAW_LIMIT);
            }
            raw[b + 7] = raw[b + 7].clamp(-TANH_RAW_LIMIT, TANH_RAW_LIMIT);
        }
    }

    /// Writes back only the values whose raw parameter moved.
    fn decode_changed(&self, raw: &[f64], before: &[f64], scene: &mut Scene, mlp: Option<&mut MlpParams>) -> Result<()> {
        let moved = |i: usize| raw[i].to_bits() != before[i].to_bits();
        scene.update(|gs| {
            for (i, g) in gs.iter_mut().enumerate() {
                let b = APPEARANCE_PARAMS * i;
                if moved(b) {
                    g.alpha = sigmoid(raw[b]);
                }
                for ch in 0..3 {
                    if moved(b + 1 + ch) {
                        g.l_iso[ch] = sigmoid(raw[b + 1 + ch]);
                    }
                    if moved(b + 4 + ch) {
                        g.l_aniso[ch] = softplus(raw[b + 4 + ch]);
                    }
                }
                if moved(b + 7) {
                    g.g = raw[b + 7].tanh();
                }
                if self.geometry {
                    let gb = self.geometry_offset() + GEOMETRY_PARAMS * i;
                    if (0..3).any(|k| moved(gb + k)) {
                        g.mu = Vec3::new(raw[gb], raw[gb + 1], raw[gb + 2]);
                    }
                    if (3..6).any(|k| moved(gb + k)) {
                        let lam = Vec3::new(raw[gb + 3].exp(), raw[gb + 4].exp(), raw[gb + 5].exp());
                        let v = self.eigvecs[i];
                        let cov = v * Mat3::from_diagonal(&lam) * v.transpose();
                        g.cov = (cov + cov.transpose()) * 0.5;
                    }
                }
            }
        });
        if let Some(m) = mlp {
            let off = self.mlp_offset();
            if (off..off + self.mlp).any(moved) {
                m.set_flat(&raw[off..off + self.mlp])?;
            }
        }
        Ok(())
    }

    /// Chains appearance-value gradients into raw-parameter gradients.
    fn chain_appearance(&self, scene: &Scene, grad_values: &[f64], out: &mut [f64]) {
        for (i, g) in scene.gaussians().iter().enumerate() {
            let b = APPEARANCE_PARAMS * i;
            out[b] = grad_values[b] * g.alpha * (1.0 - g.alpha);
            for ch in 0..3 {
                out[b + 1 + ch] = grad_values[b + 1 + ch] * g.l_iso[ch] * (1.0 - g.l_iso[ch]);
                out[b + 4 + ch] = grad_values[b + 4 + ch] * -(-g.l_aniso[ch]).exp_m1();
            }
            out[b + 7] = grad_values[b + 7] * (1.0 - g.g * g.g);
        }
    }
}

fn refresh_anchors(scene: &Scene, views: &mut [ViewData], rcfg: &RenderConfig, cfg: &FitConfig) -> Result<()> {
    for v in views.iter_mut() {
        let out = render(scene, &v.camera, rcfg)?;
        v.anchors = if out.depth.width >= 3 && out.depth.height >= 3 {
            let grad = depth_gradient(&out.depth)?;
            Some(select_anchors(&grad, cfg.anchor_k, cfg.anchor_radius, cfg.anchor_beta)?)
        } else {
            None
        };
    }
    Ok(())
}

fn sample_patches(views: &[ViewData], cfg: &FitConfig, anchoring: bool, rng: &mut ChaCha8Rng) -> Vec<Patch> {
    let ps = cfg.patch_size;
    let count = (cfg.ray_budget / (ps * ps)).max(1);
    (0..count)
        .map(|_| {
            let view = rng.random_range(0..views.len());
            let v = &views[view];
            let (h, w) = (v.camera.height, v.camera.width);
            let (ph, pw) = (ps.min(h), ps.min(w));
            let use_anchor = anchoring && rng.random::<f64>() < cfg.anchor_fraction;
            let center = match (&v.anchors, use_anchor) {
                (Some(a), true) if !a.is_empty() => {
                    let j = sample_anchor_indices(a, 1, rng)[0];
                    (a.anchors[j].row, a.anchors[j].col)
                }
                _ => (rng.random_range(0..h), rng.random_range(0..w)),
            };
            let row = center.0.saturating_sub(ph / 2).min(h - ph);
            let col = center.1.saturating_sub(pw / 2).min(w - pw);
            Patch { view, row, col, h: ph, w: pw }
        })
        .collect()
}

/// Fits `scene` (and `mlp`, when given and the dual branch is enabled) to
/// `targets`.
pub fn fit_scene(
    scene: &Scene,
    targets: &[FitTarget],
    cfg: &FitConfig,
    render_cfg: &RenderConfig,
    mlp: Option<&MlpParams>,
) -> std::result::Result<FitOutcome, FitError> {
    let start = Instant::now();
    cfg.validate()?;
    if targets.is_empty() {
        return Err(argument("fit needs at least one target").into());
    }
    let violations = scene.validate();
    if let Some(v) = violations.first() {
        return Err(argument(format!("invalid scene: {v}")).into());
    }
    let rcfg = cfg.effective_render_config(render_cfg);
    rcfg.validate()?;
    let mut mlp = if cfg.has(Ablation::NoDualBranch) { None } else { mlp.cloned() };
    if let Some(m) = &mlp {
        m.validate()?;
    }
    let mut scene = scene.clone();
    let d = mlp.as_ref().map(|m| m.d).unwrap_or(0);
    let mut views = build_views(&scene, targets, &rcfg, !cfg.optimize_geometry, mlp.is_some(), d)?;
    let anchoring = !cfg.has(Ablation::NoAnchoring) && cfg.anchor_fraction > 0.0;
    if anchoring {
        refresh_anchors(&scene, &mut views, &rcfg, cfg)?;
    }

    let layout = ParamLayout {
        n: scene.len(),
        geometry: cfg.optimize_geometry,
        mlp: mlp.as_ref().map(|m| m.num_params()).unwrap_or(0),
        eigvecs: scene.gaussians().iter().map(|g| SymmetricEigen::new(g.cov).eigenvectors).collect(),
    };
    let mut raw = layout.encode(&scene, mlp.as_ref());
    let mut state = AdamState::new(raw.len());
    let adam = cfg.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = FitReport {
        ablation: cfg.ablation.iter().copied().collect(),
        parameters: raw.len(),
        ..Default::default()
    };

    for it in 0..cfg.iters {
        let patches = sample_patches(&views, cfg, anchoring, &mut rng);
        let eval = Evaluator {
            scene: &scene,
            views: &views,
            rcfg,
            mlp: mlp.as_ref(),
            lambda_mse: cfg.lambda_mse,
            lambda_ssim: cfg.lambda_ssim,
        };
        let batch = eval.batch(&patches, true)?;
        report.loss_trace.push(batch.loss);
        report.iterations = it + 1;
        if !batch.loss.is_finite() {
            report.seconds = start.elapsed().as_secs_f64();
            return Err(FitError::NonFinite { iteration: it + 1, report: Box::new(report) });
        }

        let mut grad = vec![0.0; layout.len()];
        layout.chain_appearance(&scene, &batch.appearance, &mut grad);
        if layout.geometry {
            geometry_gradient(&scene, &views, &patches, &layout, &raw, cfg, &rcfg, mlp.as_ref(), &mut grad)?;
        }
        if let Some(g) = &batch.mlp {
            let off = layout.mlp_offset();
            grad[off..off + layout.mlp].copy_from_slice(&g.to_flat());
        }
        if grad.iter().any(|v| !v.is_finite()) {
            report.seconds = start.elapsed().as_secs_f64();
            return Err(FitError::NonFinite { iteration: it + 1, report: Box::new(report) });
        }

        let before = raw.clone();
        adam_step(&mut raw, &grad, &mut state, &adam)?;
        layout.clamp_raw(&mut raw);
        layout.decode_changed(&raw, &before, &mut scene, mlp.as_mut())?;

        let last = it + 1 == cfg.iters;
        if (it + 1) % cfg.trace_every == 0 || last {
            if layout.geometry {
                views = build_views(&scene, targets, &rcfg, false, mlp.is_some(), d)?;
            }
            let eval = Evaluator {
                scene: &scene,
                views: &views,
                rcfg,
                mlp: mlp.as_ref(),
                lambda_mse: cfg.lambda_mse,
                lambda_ssim: cfg.lambda_ssim,
            };
            let full = eval.batch(&full_patches(&views), false)?;
            report.full_loss_trace.push(TracePoint { iteration: it + 1, loss: full.loss });
            if anchoring && !last {
                refresh_anchors(&scene, &mut views, &rcfg, cfg)?;
            }
        }
    }

    finalize_report(&scene, targets, cfg, &rcfg, mlp.as_ref(), &mut report)?;
    report.seconds = start.elapsed().as_secs_f64();
    Ok(FitOutcome { scene, mlp, report })
}

#[allow(clippy::too_many_arguments)]
fn geometry_gradient(
    scene: &Scene,
    views: &[ViewData],
    patches: &[Patch],
    layout: &ParamLayout,
    raw: &[f64],
    cfg: &FitConfig,
    rcfg: &RenderConfig,
    mlp: Option<&MlpParams>,
    grad: &mut [f64],
) -> Result<()> {
    let h = cfg.geometry_fd_step;
    let off = layout.geometry_offset();
    for j in off..off + GEOMETRY_PARAMS * layout.n {
        let mut losses = [0.0; 2];
        for (k, sign) in [1.0, -1.0].into_iter().enumerate() {
            let mut probe = raw.to_vec();
            probe[j] += sign * h;
            let mut s = scene.clone();
            layout.decode_changed(&probe, raw, &mut s, None)?;
            let eval = Evaluator {
                scene: &s,
                views,
                rcfg: *rcfg,
                mlp,
                lambda_mse: cfg.lambda_mse,
                lambda_ssim: cfg.lambda_ssim,
            };
            losses[k] = eval.batch(patches, false)?.loss;
        }
        grad[j] = (losses[0] - losses[1]) / (2.0 * h);
    }
    Ok(())
}

fn finalize_report(
    scene: &Scene,
    targets: &[FitTarget],
    cfg: &FitConfig,
    rcfg: &RenderConfig,
    mlp: Option<&MlpParams>,
    report: &mut FitReport,
) -> Result<()> {
    let mut views = Vec::with_capacity(targets.len());
    for (i, t) in targets.iter().enumerate() {
        let out = match mlp {
            Some(m) => render_fused(scene, &t.camera, rcfg, m, &scene.center(), scene.radius())?,
            None => render(scene, &t.camera, rcfg)?,
        };
        let (loss, _) = composite_loss(&out.color, &t.image, cfg.lambda_mse, cfg.lambda_ssim)?;
        let s = if out.color.width >= 11 && out.color.height >= 11 {
            ssim(&out.color, &t.image, &SsimConfig::default())?
        } else {
            f64::NAN
        };
        views.push(ViewMetrics { view: i, psnr: psnr(&out.color, &t.image)?, ssim: s, loss });
    }
    let n = views.len() as f64;
    report.final_loss = views.iter().map(|v| v.loss).sum::<f64>() / n;
    report.mean_psnr = views.iter().map(|v| v.psnr).sum::<f64>() / n;
    report.mean_ssim = views.iter().map(|v| v.ssim).sum::<f64>() / n;
    report.views = views;
    Ok(())
}

/// Renders `scene` from every camera as fit targets.
pub fn targets_from_scene(scene: &Scene, cams: &[Camera], render_cfg: &RenderConfig) -> Result<Vec<FitTarget>> {
    cams.iter()
        .map(|c| Ok(FitTarget { camera: c.clone(), image: render(scene, c, render_cfg)?.color }))
        .collect()
}

/// Multiplies every appearance value by an independent factor in
/// `1 +- fraction`, staying inside each value's valid range.
pub fn perturb_appearance(scene: &Scene, fraction: f64, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = scene.clone();
    out.update(|gs| {
        for g in gs.iter_mut() {
            let mut f = || 1.0 + rng.random_range(-fraction..=fraction);
            g.alpha = (g.alpha * f()).clamp(1e-3, 1.0);
            for ch in 0..3 {
                g.l_iso[ch] = (g.l_iso[ch] * f()).clamp(0.0, 1.0);
                g.l_aniso[ch] = (g.l_aniso[ch] * f()).max(0.0);
            }
            g.g = (g.g * f()).clamp(-0.99, 0.99);
        }
    });
    out
}

/// Randomized anisotropic toy scene of `n` splats inside a unit ball.
pub fn toy_scene(n: usize, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussians = (0..n)
        .map(|_| {
            let mut mu;
            loop {
                mu = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                if mu.norm() <= 1.0 {
                    break;
                }
            }
            let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let rot = nalgebra::Rotation3::new(axis * std::f64::consts::PI);
            let scales = Vec3::new(rng.random_range(0.15..0.35), rng.random_range(0.15..0.35), rng.random_range(0.15..0.35));
            let cov = rot.matrix() * Mat3::from_diagonal(&scales.component_mul(&scales)) * rot.matrix().transpose();
            let normal = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                .normalize();
            Gaussian {
                mu,
                cov: (cov + cov.transpose()) * 0.5,
                alpha: rng.random_range(0.4..0.9),
                l_iso: Vec3::new(rng.random_range(0.1..0.7), rng.random_range(0.1..0.7), rng.random_range(0.1..0.7)),
                l_aniso: Vec3::new(rng.random_range(0.05..0.3), rng.random_range(0.05..0.3), rng.random_range(0.05..0.3)),
                normal,
                g: rng.random_range(0.3..0.7) * if rng.random::<bool>() { 1.0 } else { -1.0 },
            }
        })
        .collect();
    Scene::new(gaussians, Vec3::new(0.05, 0.05, 0.08))
}
