//! Gaussian primitives, scenes and the scene file schema.
//!
//! A scene file is UTF-8 JSON:
//!
//! ```json
//! {
//!   "background": [0.0, 0.0, 0.0],
//!   "gaussians": [
//!     { "mu": [0, 0, 0], "cov": [xx, xy, xz, yy, yz, zz], "alpha": 0.8,
//!       "l_iso": [r, g, b], "l_aniso": [r, g, b], "normal": [0, 0, 1], "g": 0.3 }
//!   ]
//! }
//! ```
//!
//! Unknown keys are rejected at every level.

use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Smallest covariance eigenvalue accepted before a primitive counts as singular.
pub const MIN_EIGENVALUE: f64 = 1e-12;
/// Tolerance on `|normal| = 1`.
pub const NORMAL_TOLERANCE: f64 = 1e-9;
/// Extent, in standard deviations, used for scene bounds.
pub const BOUNDS_SIGMA: f64 = 3.0;

/// One anisotropic 3D Gaussian splat with split isotropic/anisotropic radiance.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mu: Vec3,
    pub cov: Mat3,
    /// Peak opacity, in (0, 1].
    pub alpha: f64,
    /// Direction-independent linear radiance, per channel in [0, 1].
    pub l_iso: Vec3,
    /// Direction-dependent linear radiance, per channel >= 0.
    pub l_aniso: Vec3,
    pub normal: Vec3,
    /// Henyey-Greenstein asymmetry, in (-1, 1).
    pub g: f64,
}

impl Gaussian {
    /// An isotropic splat `sigma^2 I` with no anisotropic radiance.
    pub fn isotropic(mu: Vec3, sigma: f64, alpha: f64, l_iso: Vec3) -> Self {
        Self {
            mu,
            cov: Mat3::identity() * (sigma * sigma),
            alpha,
            l_iso,
            l_aniso: Vec3::zeros(),
            normal: Vec3::z(),
            g: 0.0,
        }
    }

    /// Evaluates `alpha * exp(-0.5 (x - mu)^T cov^-1 (x - mu))`.
    pub fn eval(&self, x: &Vec3) -> Result<f64> {
        let inv = self.inverse_cov(0)?;
        let d = x - self.mu;
        Ok(self.alpha * (-0.5 * d.dot(&(inv * d))).exp())
    }

    /// Inverse covariance, rejecting singular or indefinite matrices.
    pub fn inverse_cov(&self, index: usize) -> Result<Mat3> {
        let eig = SymmetricEigen::new(self.cov);
        let min = eig.eigenvalues.min();
        if !(min >= MIN_EIGENVALUE) {
            return Err(Error::InvalidPrimitive {
                index,
                reason: format!("singular covariance (min eigenvalue {min:e})"),
            });
        }
        self.cov.try_inverse().ok_or_else(|| Error::InvalidPrimitive {
            index,
            reason: "covariance not invertible".into(),
        })
    }

    /// Largest covariance eigenvalue, i.e. the squared major standard deviation.
    pub fn max_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.cov).eigenvalues.max()
    }

    /// Names of every invariant this primitive breaks.
    pub fn violations(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        let finite = self.mu.iter().all(|v| v.is_finite())
            && self.cov.iter().all(|v| v.is_finite())
            && self.l_iso.iter().all(|v| v.is_finite())
            && self.l_aniso.iter().all(|v| v.is_finite())
            && self.normal.iter().all(|v| v.is_finite())
            && self.alpha.is_finite()
            && self.g.is_finite();
        if !finite {
            out.push("non-finite value");
            return out;
        }
        if (self.cov - self.cov.transpose()).abs().max() > 1e-12 * self.cov.abs().max().max(1.0) {
            out.push("cov not symmetric");
        } else if SymmetricEigen::new(self.cov).eigenvalues.min() < MIN_EIGENVALUE {
            out.push("cov not positive definite");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            out.push("alpha out of range");
        }
        if self.l_iso.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            out.push("l_iso out of range");
        }
        if self.l_aniso.iter().any(|&v| v < 0.0) {
            out.push("l_aniso negative");
        }
        if (self.normal.norm() - 1.0).abs() > NORMAL_TOLERANCE {
            out.push("normal not unit");
        }
        if !(self.g > -1.0 && self.g < 1.0) {
            out.push("g out of range");
        }
        out
    }
}

/// A broken invariant, located by primitive index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub rule: &'static str,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gaussians[{}]: {}", self.index, self.rule)
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }
}

/// An ordered set of Gaussians plus background radiance.
///
/// Bounds are derived and refreshed on every mutation through [`Scene::update`]
/// or [`Scene::set_gaussians`].
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    gaussians: Vec<Gaussian>,
    pub background: Vec3,
    bounds: Aabb,
    radius: f64,
}

impl Scene {
    pub fn new(gaussians: Vec<Gaussian>, background: Vec3) -> Self {
        let mut scene = Self {
            gaussians,
            background,
            bounds: Aabb { min: Vec3::zeros(), max: Vec3::zeros() },
            radius: 1.0,
        };
        scene.refresh_bounds();
        scene
    }

    pub fn empty(background: Vec3) -> Self {
        Self::new(Vec::new(), background)
    }

    pub fn gaussians(&self) -> &[Gaussian] {
        &self.gaussians
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn set_gaussians(&mut self, gaussians: Vec<Gaussian>) {
        self.gaussians = gaussians;
        self.refresh_bounds();
    }

    /// Mutates the primitives in place and recomputes the bounds afterwards.
    pub fn update<R>(&mut self, f: impl FnOnce(&mut Vec<Gaussian>) -> R) -> R {
        let out = f(&mut self.gaussians);
        self.refresh_bounds();
        out
    }

    pub fn bounds(&self) -> Aabb {
        self.bounds
    }

    pub fn center(&self) -> Vec3 {
        self.bounds.center()
    }

    /// Bounding sphere radius around [`Scene::center`]; 1.0 for an empty scene.
    pub fn radius(&self) -> f64 {
        self.radius
    }

    fn refresh_bounds(&mut self) {
        if self.gaussians.is_empty() {
            self.bounds = Aabb { min: Vec3::zeros(), max: Vec3::zeros() };
            self.radius = 1.0;
            return;
        }
        let mut min = Vec3::repeat(f64::INFINITY);
        let mut max = Vec3::repeat(f64::NEG_INFINITY);
        for g in &self.gaussians {
            let ext = BOUNDS_SIGMA * g.max_eigenvalue().max(0.0).sqrt();
            min = min.inf(&g.mu.add_scalar(-ext));
            max = max.sup(&g.mu.add_scalar(ext));
        }
        self.bounds = Aabb { min, max };
        self.radius = ((max - min).norm() * 0.5).max(1e-9);
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate_scene(self)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: SceneFile = serde_json::from_str(text)?;
        file.try_into()
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&SceneFile::from(self)).expect("scene serializes");
        s.push('\n');
        s
    }

    /// Loads and validates a scene file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let scene = Self::from_json_str(&text)?;
        let violations = scene.validate();
        if !violations.is_empty() {
            let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(Error::Format(format!("invalid scene: {}", list.join("; "))));
        }
        Ok(scene)
    }
}

/// Lists every invariant violation; empty iff every primitive is valid.
pub fn validate_scene(scene: &Scene) -> Vec<Violation> {
    scene
        .gaussians
        .iter()
        .enumerate()
        .flat_map(|(index, g)| g.violations().into_iter().map(move |rule| Violation { index, rule }))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    background: [f64; 3],
    gaussians: Vec<GaussianRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussianRecord {
    mu: [f64; 3],
    /// Upper triangle: xx, xy, xz, yy, yz, zz.
    cov: [f64; 6],
    alpha: f64,
    l_iso: [f64; 3],
    l_aniso: [f64; 3],
    normal: [f64; 3],
    g: f64,
}

impl From<&Scene> for SceneFile {
    fn from(scene: &Scene) -> Self {
        let gaussians = scene
            .gaussians
            .iter()
            .map(|g| {
                let c = &g.cov;
                GaussianRecord {
                    mu: g.mu.into(),
                    cov: [c[(0, 0)], c[(0, 1)], c[(0, 2)], c[(1, 1)], c[(1, 2)], c[(2, 2)]],
                    alpha: g.alpha,
                    l_iso: g.l_iso.into(),
                    l_aniso: g.l_aniso.into(),
                    normal: g.normal.into(),
                    g: g.g,
                }
            })
            .collect();
        Self { background: scene.background.into(), gaussians }
    }
}

impl TryFrom<SceneFile> for Scene {
    type Error = Error;

    fn try_from(file: SceneFile) -> Result<Self> {
        let gaussians = file
            .gaussians
            .into_iter()
            .map(|r| {
                let [xx, xy, xz, yy, yz, zz] = r.cov;
                Gaussian {
                    mu: r.mu.into(),
                    cov: Mat3::new(xx, xy, xz, xy, yy, yz, xz, yz, zz),
                    alpha: r.alpha,
                    l_iso: r.l_iso.into(),
                    l_aniso: r.l_aniso.into(),
                    normal: r.normal.into(),
                    g: r.g,
                }
            })
            .collect();
        Ok(Scene::new(gaussians, file.background.into()))
    }
}
