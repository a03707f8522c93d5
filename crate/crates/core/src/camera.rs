//! Pinhole cameras, rays and orbit rigs.
//!
//! Frame convention: `right = forward x up`. Image rows grow downwards
//! (against `up`), columns grow along `right`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{argument, Result};
use crate::scene::Vec3;

/// Orthonormality tolerance on camera frames.
pub const FRAME_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit direction.
    pub dir: Vec3,
}

impl Ray {
    /// Builds a ray, normalizing `dir`.
    pub fn new(origin: Vec3, dir: Vec3) -> Self {
        Self { origin, dir: dir.normalize() }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub position: Vec3,
    pub forward: Vec3,
    pub up: Vec3,
    pub right: Vec3,
    /// Vertical field of view in radians.
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

pub const DEFAULT_NEAR: f64 = 1e-3;

impl Camera {
    /// Camera at `position` looking at `target`. `world_up` only needs to be
    /// non-parallel to the viewing direction; a fallback axis is used otherwise.
    pub fn look_at(
        position: Vec3,
        target: Vec3,
        world_up: Vec3,
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let forward = (target - position).normalize();
        let mut right = forward.cross(&world_up);
        if right.norm() < 1e-9 {
            let alt = if forward.x.abs() < 0.9 { Vec3::x() } else { Vec3::z() };
            right = forward.cross(&alt);
        }
        let right = right.normalize();
        let up = right.cross(&forward).normalize();
        Self { position, forward, up, right, fov_y, width, height, near: DEFAULT_NEAR }
    }

    pub fn aspect(&self) -> f64 {
        self.width as f64 / self.height as f64
    }

    /// Ray through the center of pixel (`row`, `col`).
    pub fn pixel_ray(&self, row: usize, col: usize) -> Ray {
        self.ray_at(row as f64 + 0.5, col as f64 + 0.5)
    }

    /// Ray through continuous image coordinates (`y` down, `x` right, in pixels).
    pub fn ray_at(&self, y: f64, x: f64) -> Ray {
        let (sx, sy) = self.screen_slopes(y, x);
        Ray::new(self.position, self.forward + self.right * sx + self.up * sy)
    }

    /// Tangent-space slopes `(x/z, y/z)` of the ray through image coordinates.
    pub fn screen_slopes(&self, y: f64, x: f64) -> (f64, f64) {
        let tan = (0.5 * self.fov_y).tan();
        let sx = (2.0 * x / self.width as f64 - 1.0) * tan * self.aspect();
        let sy = (1.0 - 2.0 * y / self.height as f64) * tan;
        (sx, sy)
    }

    /// Inverse of [`Camera::screen_slopes`]: image coordinates `(y, x)` for slopes.
    pub fn slopes_to_pixel(&self, sx: f64, sy: f64) -> (f64, f64) {
        let tan = (0.5 * self.fov_y).tan();
        let x = (sx / (tan * self.aspect()) + 1.0) * 0.5 * self.width as f64;
        let y = (1.0 - sy / tan) * 0.5 * self.height as f64;
        (y, x)
    }

    pub fn is_orthonormal(&self) -> bool {
        let unit = |v: &Vec3| (v.norm() - 1.0).abs() <= FRAME_TOLERANCE;
        unit(&self.forward)
            && unit(&self.up)
            && unit(&self.right)
            && self.forward.dot(&self.up).abs() <= FRAME_TOLERANCE
            && self.forward.dot(&self.right).abs() <= FRAME_TOLERANCE
            && self.up.dot(&self.right).abs() <= FRAME_TOLERANCE
            && (self.forward.cross(&self.up) - self.right).norm() <= FRAME_TOLERANCE
    }

    pub fn validate(&self) -> Result<()> {
        if !self.is_orthonormal() {
            return Err(argument("camera frame is not orthonormal with right = forward x up"));
        }
        if !(self.fov_y > 0.0 && self.fov_y < PI) {
            return Err(argument(format!("fov_y {} outside (0, pi)", self.fov_y)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(argument("camera has zero-sized image"));
        }
        if !(self.near > 0.0) {
            return Err(argument("camera near must be positive"));
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&CameraFile::from(self)).expect("camera serializes");
        s.push('\n');
        s
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let f: CameraFile = serde_json::from_str(text)?;
        let forward = Vec3::from(f.forward);
        let up = Vec3::from(f.up);
        let cam = Camera {
            position: f.position.into(),
            forward,
            up,
            right: f.right.map(Vec3::from).unwrap_or_else(|| forward.cross(&up)),
            fov_y: f.fov_y,
            width: f.width,
            height: f.height,
            near: f.near,
        };
        cam.validate()?;
        Ok(cam)
    }
}

/// Camera file schema; `right` defaults to `forward x up` when absent.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraFile {
    position: [f64; 3],
    forward: [f64; 3],
    up: [f64; 3],
    #[serde(default)]
    right: Option<[f64; 3]>,
    fov_y: f64,
    width: usize,
    height: usize,
    near: f64,
}

impl From<&Camera> for CameraFile {
    fn from(c: &Camera) -> Self {
        Self {
            position: c.position.into(),
            forward: c.forward.into(),
            up: c.up.into(),
            right: Some(c.right.into()),
            fov_y: c.fov_y,
            width: c.width,
            height: c.height,
            near: c.near,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrbitMode {
    Ring,
    FibonacciSphere,
}

/// Cameras on a sphere of `radius` around `center`, all looking at it.
///
/// Ring mode steps azimuth by `2pi/n` in the x-z plane (azimuth 0 on +x,
/// increasing towards +z) at fixed `elevation` above it. Fibonacci mode
/// ignores `elevation` and uses golden-angle lattice directions.
#[allow(clippy::too_many_arguments)]
pub fn make_orbit_cameras(
    center: Vec3,
    radius: f64,
    n: usize,
    elevation: f64,
    mode: OrbitMode,
    width: usize,
    height: usize,
    fov_y: f64,
) -> Result<Vec<Camera>> {
    if n == 0 {
        return Err(argument("orbit needs at least one camera"));
    }
    if !(radius > 0.0) {
        return Err(argument("orbit radius must be positive"));
    }
    let golden = PI * (3.0 - 5f64.sqrt());
    let cams = (0..n)
        .map(|i| {
            let dir = match mode {
                OrbitMode::Ring => {
                    let az = 2.0 * PI * i as f64 / n as f64;
                    Vec3::new(
                        elevation.cos() * az.cos(),
                        elevation.sin(),
                        elevation.cos() * az.sin(),
                    )
                }
                OrbitMode::FibonacciSphere => {
                    let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                    let r = (1.0 - y * y).max(0.0).sqrt();
                    let phi = golden * i as f64;
                    Vec3::new(r * phi.cos(), y, r * phi.sin())
                }
            };
            let position = center + dir.normalize() * radius;
            Camera::look_at(position, center, Vec3::y(), fov_y, width, height)
        })
        .collect();
    Ok(cams)
}
