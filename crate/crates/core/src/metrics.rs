//! PSNR, SSIM and render timing.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{argument, Result};
use crate::image::ImageBuffer;
use crate::render::{render, with_workers, RenderConfig};
use crate::scene::{Gaussian, Scene, Vec3};

/// Reported PSNR when the images are identical.
pub const PSNR_CAP_DB: f64 = 99.0;

fn check_shapes(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if !a.same_shape(b) {
        return Err(argument(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_shapes(a, b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10 log10(1 / MSE)` for unit dynamic range, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * m.log10()).min(PSNR_CAP_DB))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, dynamic_range: 1.0 }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Normalized 1D Gaussian taps; the 2D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let half = (self.window as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    }
}

/// Separable "valid" correlation of a `h x w` plane.
fn filter_valid(x: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            tmp[r * ow + c] = taps.iter().enumerate().map(|(i, t)| t * x[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = taps.iter().enumerate().map(|(i, t)| t * tmp[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: spreads a `(h-k+1) x (w-k+1)` map back to `h x w`.
fn filter_valid_adjoint(m: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut tmp = vec![0.0; h * ow];
    for r in 0..oh {
        for c in 0..ow {
            let v = m[r * ow + c];
            for (i, t) in taps.iter().enumerate() {
                tmp[(r + i) * ow + c] += t * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..ow {
            let v = tmp[r * ow + c];
            for (i, t) in taps.iter().enumerate() {
                out[r * w + c + i] += t * v;
            }
        }
    }
    out
}

/// Mean SSIM of one plane and, optionally, its gradient with respect to `x`.
pub(crate) fn ssim_plane(
    x: &[f64],
    y: &[f64],
    w: usize,
    h: usize,
    cfg: &SsimConfig,
    want_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let taps = cfg.taps();
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(x, w, h, &taps);
    let my = filter_valid(y, w, h, &taps);
    let sxx = filter_valid(&xx, w, h, &taps);
    let syy = filter_valid(&yy, w, h, &taps);
    let sxy = filter_valid(&xy, w, h, &taps);
    let n = mx.len();
    let mut total = 0.0;
    let (mut m1, mut m2, mut m3) = if want_grad {
        (vec![0.0; n], vec![0.0; n], vec![0.0; n])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for p in 0..n {
        let (ux, uy) = (mx[p], my[p]);
        let vx = sxx[p] - ux * ux;
        let vy = syy[p] - uy * uy;
        let cxy = sxy[p] - ux * uy;
        let a1 = 2.0 * ux * uy + c1;
        let a2 = 2.0 * cxy + c2;
        let b1 = ux * ux + uy * uy + c1;
        let b2 = vx + vy + c2;
        let s = (a1 * a2) / (b1 * b2);
        total += s;
        if want_grad {
            m1[p] = 2.0 * s * (uy / a1 - ux / b1 - uy / a2 + ux / b2);
            m2[p] = 2.0 * s / a2;
            m3[p] = -2.0 * s / b2;
        }
    }
    let mean = total / n as f64;
    if !want_grad {
        return (mean, None);
    }
    let g1 = filter_valid_adjoint(&m1, w, h, &taps);
    let g2 = filter_valid_adjoint(&m2, w, h, &taps);
    let g3 = filter_valid_adjoint(&m3, w, h, &taps);
    let inv = 1.0 / n as f64;
    let grad = (0..w * h).map(|q| (g1[q] + y[q] * g2[q] + x[q] * g3[q]) * inv).collect();
    (mean, Some(grad))
}

fn plane(img: &ImageBuffer, ch: usize) -> Vec<f64> {
    img.data.iter().skip(ch).step_by(img.channels).copied().collect()
}

/// Mean local SSIM over valid window positions, averaged over channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer, cfg: &SsimConfig) -> Result<f64> {
    check_shapes(a, b)?;
    if a.width < cfg.window || a.height < cfg.window {
        return Err(argument(format!(
            "image {}x{} smaller than the {}x{} SSIM window",
            a.width, a.height, cfg.window, cfg.window
        )));
    }
    let sum: f64 = (0..a.channels)
        .map(|ch| ssim_plane(&plane(a, ch), &plane(b, ch), a.width, a.height, cfg, false).0)
        .sum();
    Ok(sum / a.channels as f64)
}

/// SSIM of `a` against `b` and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &ImageBuffer, b: &ImageBuffer, cfg: &SsimConfig) -> Result<(f64, Vec<f64>)> {
    ssim(a, b, cfg)?;
    let c = a.channels;
    let mut grad = vec![0.0; a.data.len()];
    let mut sum = 0.0;
    for ch in 0..c {
        let (s, g) = ssim_plane(&plane(a, ch), &plane(b, ch), a.width, a.height, cfg, true);
        sum += s;
        for (q, v) in g.unwrap().into_iter().enumerate() {
            grad[q * c + ch] = v / c as f64;
        }
    }
    Ok((sum / c as f64, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeReport {
    pub width: usize,
    pub height: usize,
    pub gaussians: usize,
    pub frames: usize,
    pub total_seconds: f64,
    pub fps: f64,
    pub ms_per_frame: f64,
    pub workers: usize,
    pub hardware: HardwareInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareInfo {
    pub cpu: String,
    pub logical_cores: usize,
    pub os: String,
    pub arch: String,
}

impl HardwareInfo {
    pub fn detect() -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split_once(':'))
                    .map(|(_, v)| v.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        Self {
            cpu,
            logical_cores: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
        }
    }
}

/// Renders every camera on a pool of `workers` threads after one untimed
/// warm-up frame.
pub fn measure_runtime(scene: &Scene, cams: &[Camera], cfg: &RenderConfig, workers: usize) -> Result<RuntimeReport> {
    let first = cams.first().ok_or_else(|| argument("measure_runtime needs at least one camera"))?;
    let workers = workers.max(1);
    let total_seconds = with_workers(workers, || -> Result<f64> {
        render(scene, first, cfg)?;
        let start = Instant::now();
        for cam in cams {
            render(scene, cam, cfg)?;
        }
        Ok(start.elapsed().as_secs_f64())
    })?;
    let frames = cams.len();
    let ms_per_frame = total_seconds * 1000.0 / frames as f64;
    Ok(RuntimeReport {
        width: first.width,
        height: first.height,
        gaussians: scene.len(),
        frames,
        total_seconds,
        fps: if total_seconds > 0.0 { frames as f64 / total_seconds } else { f64::INFINITY },
        ms_per_frame,
        workers,
        hardware: HardwareInfo::detect(),
    })
}

/// `n` small random splats inside the unit ball, for throughput runs.
pub fn benchmark_scene(n: usize, seed: u64) -> Scene {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let gaussians = (0..n)
        .map(|_| {
            let mu = loop {
                let p = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                if p.norm() <= 1.0 {
                    break p;
                }
            };
            let mut g = Gaussian::isotropic(
                mu,
                rng.random_range(0.02..0.06),
                rng.random_range(0.3..0.9),
                Vec3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()),
            );
            g.l_aniso = Vec3::repeat(rng.random_range(0.0..0.3));
            g.normal = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                .try_normalize(1e-9)
                .unwrap_or(Vec3::z());
            g.g = rng.random_range(-0.5..0.5);
            g
        })
        .collect();
    Scene::new(gaussians, Vec3::zeros())
}
