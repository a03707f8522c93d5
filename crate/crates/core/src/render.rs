//! Front-to-back compositing of Gaussian splats along camera rays.
//!
//! Each primitive contributes once per ray, at the ray parameter where its
//! density peaks. With weights `w_i` sorted by that parameter the ray color is
//!
//! ```text
//! C = sum_i T_i w_i (l_iso_i + f_i l_aniso_i) + T_final * background
//! T_1 = 1,  T_{i+1} = T_i (1 - w_i)
//! ```
//!
//! where `f_i = 4 pi p_HG(dir . n_i; g_i)` equals 1 for `g = 0`.

use std::cmp::Ordering;
use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Ray};
use crate::error::{argument, Error, Result};
use crate::image::{ImageBuffer, ImageKind};
use crate::scene::{Gaussian, Mat3, Scene, Vec3};

pub const TILE_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    /// Stop compositing once transmittance drops below this.
    pub termination_epsilon: f64,
    /// Ignore primitives whose closest-approach Mahalanobis distance exceeds this.
    pub cutoff_sigma: f64,
    /// When false the anisotropic term is folded in with `f = 1`.
    pub disentangle: bool,
    /// When false `f = 0`.
    pub anisotropy_enabled: bool,
    /// Minimum ray parameter; cameras raise it to their own near plane.
    pub near: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            termination_epsilon: 1e-3,
            cutoff_sigma: 3.0,
            disentangle: true,
            anisotropy_enabled: true,
            near: 0.0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.termination_epsilon > 0.0 && self.termination_epsilon < 1.0) {
            return Err(argument("termination_epsilon must lie in (0, 1)"));
        }
        if !(self.cutoff_sigma > 0.0) {
            return Err(argument("cutoff_sigma must be positive"));
        }
        if !(self.near >= 0.0) {
            return Err(argument("near must be non-negative"));
        }
        Ok(())
    }

    /// Multiplier applied to `l_aniso` for a hit with `cos = dir . normal`.
    #[inline]
    pub fn anisotropy_factor(&self, cos_theta: f64, g: f64) -> f64 {
        if !self.anisotropy_enabled {
            0.0
        } else if !self.disentangle {
            1.0
        } else {
            normalized_phase(cos_theta, g)
        }
    }
}

/// Henyey-Greenstein phase function of `cos = dir . normal`.
pub fn phase(dir: &Vec3, normal: &Vec3, g: f64) -> Result<f64> {
    if !(g > -1.0 && g < 1.0) {
        return Err(argument(format!("phase asymmetry g = {g} outside (-1, 1)")));
    }
    Ok(henyey_greenstein(dir.dot(normal), g))
}

#[inline]
pub fn henyey_greenstein(cos_theta: f64, g: f64) -> f64 {
    normalized_phase(cos_theta, g) / (4.0 * PI)
}

/// `4 pi p_HG`, exactly 1 at `g = 0`.
#[inline]
pub fn normalized_phase(cos_theta: f64, g: f64) -> f64 {
    let denom = 1.0 + g * g - 2.0 * g * cos_theta;
    (1.0 - g * g) / (denom * denom.sqrt())
}

/// Derivative of [`normalized_phase`] with respect to `g`.
#[inline]
pub fn normalized_phase_dg(cos_theta: f64, g: f64) -> f64 {
    let denom = 1.0 + g * g - 2.0 * g * cos_theta;
    let num = 1.0 - g * g;
    let d15 = denom * denom.sqrt();
    (-2.0 * g) / d15 - 1.5 * num * (2.0 * g - 2.0 * cos_theta) / (d15 * denom)
}

/// Geometry of a primitive prepared for ray queries.
#[derive(Debug, Clone)]
pub struct PreparedGaussian {
    pub mu: Vec3,
    pub inv_cov: Mat3,
    /// Euclidean radius containing every point within the Mahalanobis cutoff.
    pub bound_radius: f64,
}

impl PreparedGaussian {
    pub fn new(g: &Gaussian, index: usize, cutoff_sigma: f64) -> Result<Self> {
        let inv_cov = g.inverse_cov(index)?;
        Ok(Self { mu: g.mu, inv_cov, bound_radius: cutoff_sigma * g.max_eigenvalue().sqrt() })
    }
}

/// One primitive met by a ray, before appearance is applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub index: usize,
    pub t: f64,
    /// `exp(-m^2 / 2)` at the closest approach; weight is `alpha * kernel`.
    pub kernel: f64,
    pub cos_theta: f64,
}

/// Closest-approach parameter and squared Mahalanobis distance along the ray.
#[inline]
fn closest_approach(p: &PreparedGaussian, ray: &Ray, index: usize) -> Result<(f64, f64)> {
    let sd = p.inv_cov * ray.dir;
    let denom = ray.dir.dot(&sd);
    if !(denom > 0.0) {
        return Err(Error::InvalidPrimitive {
            index,
            reason: "degenerate ray quadratic form".into(),
        });
    }
    let v = p.mu - ray.origin;
    let t = sd.dot(&v) / denom;
    let d = ray.at(t) - p.mu;
    let m2 = d.dot(&(p.inv_cov * d)).max(0.0);
    Ok((t, m2))
}

#[inline]
fn hit_for(
    p: &PreparedGaussian,
    normal: &Vec3,
    ray: &Ray,
    index: usize,
    near: f64,
    cutoff_sigma: f64,
) -> Result<Option<RayHit>> {
    let (t, m2) = closest_approach(p, ray, index)?;
    if t < near || m2 > cutoff_sigma * cutoff_sigma {
        return Ok(None);
    }
    Ok(Some(RayHit { index, t, kernel: (-0.5 * m2).exp(), cos_theta: ray.dir.dot(normal) }))
}

#[inline]
fn splat_weight(alpha: f64, kernel: f64) -> f64 {
    (alpha * kernel).clamp(0.0, 1.0)
}

/// Peak ray parameter `t*` and splat weight `w` of one primitive.
///
/// `w` is zero when `t* < near` or the closest approach lies beyond
/// `cutoff_sigma` standard deviations.
pub fn ray_gaussian_weight(
    g: &Gaussian,
    ray: &Ray,
    near: f64,
    cutoff_sigma: f64,
) -> Result<(f64, f64)> {
    let p = PreparedGaussian::new(g, 0, cutoff_sigma)?;
    let (t, m2) = closest_approach(&p, ray, 0)?;
    if t < near || m2 > cutoff_sigma * cutoff_sigma {
        return Ok((t, 0.0));
    }
    Ok((t, splat_weight(g.alpha, (-0.5 * m2).exp())))
}

/// Per-step record of the compositing loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySample {
    pub index: usize,
    pub t: f64,
    pub weight: f64,
    pub transmittance_before: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayResult {
    pub color: Vec3,
    /// `sum T w l_iso + T_final * background`.
    pub iso_sum: Vec3,
    /// `sum T w f l_aniso`.
    pub aniso_sum: Vec3,
    pub depth: f64,
    pub final_transmittance: f64,
    pub samples: Vec<RaySample>,
}

/// A scene with per-primitive geometry prepared for ray queries.
pub struct PreparedScene<'a> {
    pub scene: &'a Scene,
    pub prims: Vec<PreparedGaussian>,
    pub cfg: RenderConfig,
}

impl<'a> PreparedScene<'a> {
    pub fn new(scene: &'a Scene, cfg: &RenderConfig) -> Result<Self> {
        cfg.validate()?;
        let prims = scene
            .gaussians()
            .iter()
            .enumerate()
            .map(|(i, g)| PreparedGaussian::new(g, i, cfg.cutoff_sigma))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { scene, prims, cfg: *cfg })
    }

    /// Collects and sorts the hits of `ray` among `candidates`.
    pub fn gather_hits(
        &self,
        ray: &Ray,
        near: f64,
        candidates: impl IntoIterator<Item = usize>,
        out: &mut Vec<RayHit>,
    ) -> Result<()> {
        out.clear();
        let gs = self.scene.gaussians();
        for i in candidates {
            let p = &self.prims[i];
            if (p.mu - ray.origin).cross(&ray.dir).norm_squared()
                > p.bound_radius * p.bound_radius * 1.000_001 + 1e-300
            {
                continue;
            }
            if let Some(hit) = hit_for(p, &gs[i].normal, ray, i, near, self.cfg.cutoff_sigma)? {
                out.push(hit);
            }
        }
        out.sort_unstable_by(|a, b| a.t.total_cmp(&b.t));
        let mut i = 0;
        while i < out.len() {
            let j = i + out[i..].iter().take_while(|h| h.t.to_bits() == out[i].t.to_bits()).count();
            if j - i > 1 {
                out[i..j].sort_unstable_by(|a, b| hit_order(a, b, &gs[a.index], &gs[b.index]));
            }
            i = j;
        }
        Ok(())
    }

    /// Hits against every primitive.
    pub fn hits(&self, ray: &Ray, near: f64) -> Result<Vec<RayHit>> {
        let mut out = Vec::new();
        self.gather_hits(ray, near, 0..self.prims.len(), &mut out)?;
        Ok(out)
    }
}

/// Total order on hits that does not depend on storage order.
fn hit_order(a: &RayHit, b: &RayHit, ga: &Gaussian, gb: &Gaussian) -> Ordering {
    a.t.total_cmp(&b.t)
        .then_with(|| a.kernel.total_cmp(&b.kernel))
        .then_with(|| key_cmp(ga, gb))
}

fn key_cmp(a: &Gaussian, b: &Gaussian) -> Ordering {
    let fields = |g: &Gaussian| {
        let mut v = Vec::with_capacity(23);
        v.extend(g.mu.iter());
        v.extend(g.cov.iter());
        v.push(g.alpha);
        v.extend(g.l_iso.iter());
        v.extend(g.l_aniso.iter());
        v.extend(g.normal.iter());
        v.push(g.g);
        v
    };
    let (fa, fb) = (fields(a), fields(b));
    fa.iter().zip(&fb).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

/// Composites sorted hits with the current appearance of `gaussians`.
///
/// When `samples` is given every compositing step is recorded into it.
pub fn shade_hits(
    hits: &[RayHit],
    gaussians: &[Gaussian],
    background: &Vec3,
    cfg: &RenderConfig,
    mut samples: Option<&mut Vec<RaySample>>,
) -> RayResult {
    let mut transmittance = 1.0;
    let mut color = Vec3::zeros();
    let mut iso = Vec3::zeros();
    let mut aniso = Vec3::zeros();
    let mut depth_num = 0.0;
    let mut weight_sum = 0.0;
    if let Some(s) = samples.as_deref_mut() {
        s.clear();
    }
    for hit in hits {
        let g = &gaussians[hit.index];
        let w = splat_weight(g.alpha, hit.kernel);
        let f = cfg.anisotropy_factor(hit.cos_theta, g.g);
        let tw = transmittance * w;
        color += (g.l_iso + g.l_aniso * f) * tw;
        iso += g.l_iso * tw;
        aniso += g.l_aniso * (f * tw);
        depth_num += tw * hit.t;
        weight_sum += tw;
        if let Some(s) = samples.as_deref_mut() {
            s.push(RaySample { index: hit.index, t: hit.t, weight: w, transmittance_before: transmittance });
        }
        transmittance *= 1.0 - w;
        if transmittance < cfg.termination_epsilon {
            break;
        }
    }
    color += background * transmittance;
    iso += background * transmittance;
    RayResult {
        color,
        iso_sum: iso,
        aniso_sum: aniso,
        depth: if weight_sum > 0.0 { depth_num / weight_sum } else { 0.0 },
        final_transmittance: transmittance,
        samples: samples.map(|s| s.clone()).unwrap_or_default(),
    }
}

/// Composites every primitive of `scene` along `ray`, recording the samples.
pub fn composite_ray(scene: &Scene, ray: &Ray, cfg: &RenderConfig) -> Result<RayResult> {
    let prepared = PreparedScene::new(scene, cfg)?;
    let hits = prepared.hits(ray, cfg.near)?;
    let mut samples = Vec::new();
    Ok(shade_hits(&hits, scene.gaussians(), &scene.background, cfg, Some(&mut samples)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: ImageBuffer,
    pub depth: ImageBuffer,
    pub transmittance: ImageBuffer,
}

/// Renders one view. Runs on the current rayon pool; output does not depend
/// on the number of workers.
pub fn render(scene: &Scene, cam: &Camera, cfg: &RenderConfig) -> Result<RenderOutput> {
    render_with(scene, cam, cfg, |_, r| r.color)
}

/// Renders one view, mapping each ray's compositing result to a color.
pub fn render_with<F>(scene: &Scene, cam: &Camera, cfg: &RenderConfig, shader: F) -> Result<RenderOutput>
where
    F: Fn(&Ray, &RayResult) -> Vec3 + Sync,
{
    cam.validate()?;
    let prepared = PreparedScene::new(scene, cfg)?;
    let near = cfg.near.max(cam.near);
    let bins = TileBins::build(&prepared, cam);
    let (w, h) = (cam.width, cam.height);

    let tiles: Vec<Result<TilePixels>> = (0..bins.tiles_x * bins.tiles_y)
        .into_par_iter()
        .map(|tile| {
            let (ty, tx) = (tile / bins.tiles_x, tile % bins.tiles_x);
            let (r0, c0) = (ty * TILE_SIZE, tx * TILE_SIZE);
            let (r1, c1) = ((r0 + TILE_SIZE).min(h), (c0 + TILE_SIZE).min(w));
            let candidates = &bins.lists[tile];
            let mut hits = Vec::new();
            let mut px = TilePixels::default();
            for row in r0..r1 {
                for col in c0..c1 {
                    let ray = cam.pixel_ray(row, col);
                    prepared.gather_hits(&ray, near, candidates.iter().copied(), &mut hits)?;
                    let res = shade_hits(&hits, scene.gaussians(), &scene.background, cfg, None);
                    let c = shader(&ray, &res);
                    px.color.extend_from_slice(&[c.x, c.y, c.z]);
                    px.depth.push(res.depth);
                    px.transmittance.push(res.final_transmittance);
                }
            }
            Ok(px)
        })
        .collect();

    let mut out = RenderOutput {
        color: ImageBuffer::new(w, h, 3, ImageKind::Radiance),
        depth: ImageBuffer::new(w, h, 1, ImageKind::Depth),
        transmittance: ImageBuffer::new(w, h, 1, ImageKind::Transmittance),
    };
    for (tile, px) in tiles.into_iter().enumerate() {
        let px = px?;
        let (ty, tx) = (tile / bins.tiles_x, tile % bins.tiles_x);
        let (r0, c0) = (ty * TILE_SIZE, tx * TILE_SIZE);
        let (r1, c1) = ((r0 + TILE_SIZE).min(h), (c0 + TILE_SIZE).min(w));
        let mut k = 0;
        for row in r0..r1 {
            for col in c0..c1 {
                for ch in 0..3 {
                    out.color.set(row, col, ch, px.color[3 * k + ch]);
                }
                out.depth.set(row, col, 0, px.depth[k]);
                out.transmittance.set(row, col, 0, px.transmittance[k]);
                k += 1;
            }
        }
    }
    Ok(out)
}

#[derive(Default)]
struct TilePixels {
    color: Vec<f64>,
    depth: Vec<f64>,
    transmittance: Vec<f64>,
}

/// Conservative assignment of primitives to screen tiles.
struct TileBins {
    tiles_x: usize,
    tiles_y: usize,
    lists: Vec<Vec<usize>>,
}

impl TileBins {
    fn build(prepared: &PreparedScene<'_>, cam: &Camera) -> Self {
        let tiles_x = cam.width.div_ceil(TILE_SIZE);
        let tiles_y = cam.height.div_ceil(TILE_SIZE);
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        for (i, p) in prepared.prims.iter().enumerate() {
            let Some((r0, r1, c0, c1)) = pixel_footprint(p, cam) else { continue };
            for ty in r0 / TILE_SIZE..=r1 / TILE_SIZE {
                for tx in c0 / TILE_SIZE..=c1 / TILE_SIZE {
                    lists[ty * tiles_x + tx].push(i);
                }
            }
        }
        Self { tiles_x, tiles_y, lists }
    }
}

/// Inclusive pixel rectangle `(row0, row1, col0, col1)` whose rays may meet
/// the primitive's bounding sphere, or `None` if no pixel can.
fn pixel_footprint(p: &PreparedGaussian, cam: &Camera) -> Option<(usize, usize, usize, usize)> {
    let (w, h) = (cam.width, cam.height);
    let full = Some((0, h - 1, 0, w - 1));
    let v = p.mu - cam.position;
    let (x, y, z) = (v.dot(&cam.right), v.dot(&cam.up), v.dot(&cam.forward));
    let r = p.bound_radius * 1.001 + 1e-9;
    if z + r <= 0.0 {
        return None;
    }
    if z - r <= 1e-6 * r.max(1.0) {
        return full;
    }
    let slope_range = |c: f64| {
        let t = (c * c + z * z - r * r).max(0.0).sqrt();
        let den = z * z - r * r;
        ((c * z - r * t) / den, (c * z + r * t) / den)
    };
    let (sx0, sx1) = slope_range(x);
    let (sy0, sy1) = slope_range(y);
    let (ya, xa) = cam.slopes_to_pixel(sx0, sy1);
    let (yb, xb) = cam.slopes_to_pixel(sx1, sy0);
    // pixel centers sit at +0.5; pad one pixel on each side
    let c0 = (xa - 1.5).floor();
    let c1 = (xb + 0.5).ceil();
    let r0 = (ya - 1.5).floor();
    let r1 = (yb + 0.5).ceil();
    if !(c0.is_finite() && c1.is_finite() && r0.is_finite() && r1.is_finite()) {
        return full;
    }
    if c1 < 0.0 || r1 < 0.0 || c0 > (w - 1) as f64 || r0 > (h - 1) as f64 {
        return None;
    }
    let clamp = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
    Some((clamp(r0, h - 1), clamp(r1, h - 1), clamp(c0, w - 1), clamp(c1, w - 1)))
}

/// Runs `f` on a dedicated pool of `workers` threads (0 = current pool).
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    if workers == 0 {
        return f();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool")
        .install(f)
}
