//! Finite-difference checks of every analytic gradient in the crate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::Result;
use crate::fit::{appearance_loss_and_gradient, composite_loss, FitConfig, FitTarget, APPEARANCE_PARAMS};
use crate::fusion::{fuse_backward_vec, fuse_vec, hidden_preactivations, MlpParams, DEFAULT_EMBED_DIM};
use crate::image::{ImageBuffer, ImageKind};
use crate::render::{render, RenderConfig};
use crate::scene::{Gaussian, Scene, Vec3};

/// Gradient magnitude below which errors are measured against this floor
/// instead of the gradient itself; finite differences cannot resolve
/// relative errors on smaller components.
pub const RELATIVE_FLOOR: f64 = 1e-6;
const KINK_MARGIN: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub tol: f64,
    pub render_tol: f64,
    pub draws: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { seed: 7, tol: 1e-4, render_tol: 1e-3, draws: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub components: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, components: usize, max_error: f64, tolerance: f64) -> Self {
        Self { name: name.into(), components, max_error, tolerance, passed: max_error <= tolerance }
    }
}

/// `|analytic - numeric| / max(|analytic|, |numeric|, RELATIVE_FLOOR)`.
pub fn gradient_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn central(h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    Ok((f(h)? - f(-h)?) / (2.0 * h))
}

/// Central differences at `h` and `h / 2` combined to cancel the `h^2` term.
fn richardson(h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let coarse = central(h, &mut f)?;
    let fine = central(h / 2.0, &mut f)?;
    Ok((4.0 * fine - coarse) / 3.0)
}

/// MLP parameter and input gradients, `draws` random networks and inputs.
pub fn check_fusion(seed: u64, draws: usize, tol: f64) -> Result<CheckResult> {
    let h = 2e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut done = 0;
    while done < draws {
        let mut params = MlpParams::init(DEFAULT_EMBED_DIM, rng.random());
        for l in &mut params.layers {
            l.biases.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
        let x: Vec<f64> = (0..MlpParams::input_dim(DEFAULT_EMBED_DIM)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let up = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        // finite differences are meaningless across a ReLU kink
        if hidden_preactivations(&x, &params)?.iter().any(|z| z.abs() < KINK_MARGIN) {
            continue;
        }
        done += 1;
        let (grads, gx) = fuse_backward_vec(&x, &params, &up)?;
        let flat = params.to_flat();
        let analytic = grads.to_flat();
        let mut probe = params.clone();
        for (j, &a) in analytic.iter().enumerate() {
            let n = richardson(h, |d| {
                let mut p = flat.clone();
                p[j] += d;
                probe.set_flat(&p)?;
                Ok(fuse_vec(&x, &probe)?.dot(&up))
            })?;
            worst = worst.max(gradient_error(a, n));
            count += 1;
        }
        for (j, &a) in gx.iter().enumerate() {
            let n = richardson(h, |d| {
                let mut xp = x.clone();
                xp[j] += d;
                Ok(fuse_vec(&xp, &params)?.dot(&up))
            })?;
            worst = worst.max(gradient_error(a, n));
            count += 1;
        }
    }
    Ok(CheckResult::new("fusion_mlp", count, worst, tol))
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ImageBuffer {
    let data = (0..w * h * 3).map(|_| rng.random_range(0.05..0.95)).collect();
    ImageBuffer::from_data(w, h, 3, ImageKind::Radiance, data).expect("shape")
}

/// `lambda_mse * MSE + lambda_ssim * (1 - SSIM)` pixel gradients. Images
/// are `size x size`; `lambda_ssim` must be 0 below the SSIM window.
pub fn check_composite_loss(seed: u64, draws: usize, size: usize, lambda_ssim: f64, tol: f64) -> Result<CheckResult> {
    let h = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut count = 0;
    for _ in 0..draws {
        let pred = random_image(&mut rng, size, size);
        let target = random_image(&mut rng, size, size);
        let (_, grad) = composite_loss(&pred, &target, 1.0, lambda_ssim)?;
        let mut probe = pred.clone();
        for j in 0..pred.data.len() {
            let n = richardson(h, |d| {
                probe.data[j] = pred.data[j] + d;
                Ok(composite_loss(&probe, &target, 1.0, lambda_ssim)?.0)
            })?;
            probe.data[j] = pred.data[j];
            worst = worst.max(gradient_error(grad.data[j], n));
            count += 1;
        }
    }
    let name = if lambda_ssim > 0.0 { "composite_loss_ssim" } else { "composite_loss_mse" };
    Ok(CheckResult::new(name, count, worst, tol))
}

/// Three translucent splats seen by a 16x16 camera.
pub fn three_splat_case(seed: u64) -> (Scene, Camera, Scene) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let make = |rng: &mut ChaCha8Rng| -> Vec<Gaussian> {
        (0..3)
            .map(|i| {
                let mut g = Gaussian::isotropic(
                    Vec3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), 0.3 * i as f64 - 0.3),
                    rng.random_range(0.35..0.5),
                    rng.random_range(0.2..0.4),
                    Vec3::new(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)),
                );
                g.l_aniso = Vec3::new(rng.random_range(0.1..0.4), rng.random_range(0.1..0.4), rng.random_range(0.1..0.4));
                g.normal = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0).normalize();
                g.g = rng.random_range(-0.6..0.6);
                g
            })
            .collect()
    };
    let bg = Vec3::new(0.1, 0.1, 0.15);
    let scene = Scene::new(make(&mut rng), bg);
    let other = Scene::new(make(&mut rng), bg);
    let cam = Camera::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::zeros(), Vec3::y(), 0.8, 16, 16);
    (scene, cam, other)
}

fn set_appearance(g: &mut Gaussian, k: usize, v: f64) {
    match k {
        0 => g.alpha = v,
        1..=3 => g.l_iso[k - 1] = v,
        4..=6 => g.l_aniso[k - 4] = v,
        _ => g.g = v,
    }
}

fn get_appearance(g: &Gaussian, k: usize) -> f64 {
    match k {
        0 => g.alpha,
        1..=3 => g.l_iso[k - 1],
        4..=6 => g.l_aniso[k - 4],
        _ => g.g,
    }
}

/// Appearance gradient of the full-render loss against re-rendering.
pub fn check_render_appearance(seed: u64, tol: f64) -> Result<CheckResult> {
    let h = 1e-6;
    let (scene, cam, other) = three_splat_case(seed);
    let rcfg = RenderConfig::default();
    let target = render(&other, &cam, &rcfg)?.color;
    let cfg = FitConfig::default();
    let targets = [FitTarget { camera: cam.clone(), image: target.clone() }];
    let (_, grad) = appearance_loss_and_gradient(&scene, &targets, &cfg, &rcfg)?;
    let mut worst = 0.0f64;
    for i in 0..scene.len() {
        for k in 0..APPEARANCE_PARAMS {
            let base = get_appearance(&scene.gaussians()[i], k);
            let n = central(h, |d| {
                let mut s = scene.clone();
                s.update(|gs| set_appearance(&mut gs[i], k, base + d));
                let pred = render(&s, &cam, &rcfg)?.color;
                Ok(composite_loss(&pred, &target, cfg.lambda_mse, cfg.lambda_ssim)?.0)
            })?;
            worst = worst.max(gradient_error(grad[APPEARANCE_PARAMS * i + k], n));
        }
    }
    Ok(CheckResult::new("render_appearance", APPEARANCE_PARAMS * scene.len(), worst, tol))
}

/// Every check, in a fixed order.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<Vec<CheckResult>> {
    Ok(vec![
        check_fusion(cfg.seed, cfg.draws, cfg.tol)?,
        check_composite_loss(cfg.seed, cfg.draws, 8, 0.0, cfg.tol)?,
        check_composite_loss(cfg.seed, cfg.draws, 16, 0.2, cfg.tol)?,
        check_render_appearance(cfg.seed, cfg.render_tol)?,
    ])
}
