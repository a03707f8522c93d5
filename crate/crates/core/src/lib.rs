//! Direction-disentangled Gaussian splat rendering.
//!
//! The crate renders explicit Gaussian scenes whose radiance is split into an
//! isotropic part and a phase-function-weighted anisotropic part, simulates
//! radiographs from CT volumes with Beer-Lambert attenuation, samples rays
//! around depth-gradient anchors, and fits scene appearance to target views.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod anchor;
pub mod camera;
pub mod check;
pub mod ct;
pub mod error;
pub mod fit;
pub mod fusion;
pub mod image;
pub mod io;
pub mod metrics;
pub mod render;
pub mod scene;

pub use camera::{make_orbit_cameras, Camera, OrbitMode, Ray};
pub use error::{Error, Result};
pub use image::{ImageBuffer, ImageKind};
pub use render::{composite_ray, phase, ray_gaussian_weight, render, RenderConfig, RenderOutput};
pub use scene::{validate_scene, Gaussian, Mat3, Scene, Vec3, Violation};
