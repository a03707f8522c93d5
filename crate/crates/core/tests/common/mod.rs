#![allow(dead_code)]

use nalgebra::Rotation3;
use proptest::prelude::*;
use splat360::{Gaussian, Mat3, Scene, Vec3};

pub fn vec3(lo: f64, hi: f64) -> impl Strategy<Value = Vec3> {
    (lo..hi, lo..hi, lo..hi).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

pub fn unit_vec3() -> impl Strategy<Value = Vec3> {
    vec3(-1.0, 1.0).prop_filter("non-degenerate", |v| v.norm() > 0.1).prop_map(|v| v.normalize())
}

pub fn rotation() -> impl Strategy<Value = Rotation3<f64>> {
    vec3(-3.0, 3.0).prop_map(Rotation3::new)
}

pub fn covariance() -> impl Strategy<Value = Mat3> {
    (rotation(), vec3(0.05, 0.5)).prop_map(|(r, s)| {
        let c = r.matrix() * Mat3::from_diagonal(&s.component_mul(&s)) * r.matrix().transpose();
        (c + c.transpose()) * 0.5
    })
}

pub fn gaussian() -> impl Strategy<Value = Gaussian> {
    (vec3(-1.0, 1.0), covariance(), 0.01f64..=1.0, vec3(0.0, 1.0), vec3(0.0, 1.0), unit_vec3(), -0.95f64..0.95)
        .prop_map(|(mu, cov, alpha, l_iso, l_aniso, normal, g)| Gaussian { mu, cov, alpha, l_iso, l_aniso, normal, g })
}

pub fn scene(max: usize) -> impl Strategy<Value = Scene> {
    (prop::collection::vec(gaussian(), 0..=max), vec3(0.0, 1.0)).prop_map(|(gs, bg)| Scene::new(gs, bg))
}

/// Ray origin on a sphere of radius 3 aimed near the origin.
pub fn ray_toward_scene() -> impl Strategy<Value = splat360::Ray> {
    (unit_vec3(), vec3(-0.8, 0.8)).prop_map(|(d, target)| {
        let origin = d * 3.0;
        splat360::Ray::new(origin, target - origin)
    })
}

pub fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!((a - b).abs() <= tol, "{what}: {a} vs {b} (tol {tol})");
}
