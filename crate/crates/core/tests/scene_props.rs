mod common;

use common::*;
use proptest::prelude::*;
use splat360::{make_orbit_cameras, validate_scene, Camera, Gaussian, OrbitMode, Scene, Vec3};

proptest! {
    #[test]
    fn eval_rotation_invariant(p in gaussian(), x in vec3(-2.0, 2.0), r in rotation()) {
        let mut q = p.clone();
        q.mu = r * p.mu;
        q.cov = r.matrix() * p.cov * r.matrix().transpose();
        q.normal = r * p.normal;
        let a = p.eval(&x).unwrap();
        let b = q.eval(&(r * x)).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-300), "{} vs {}", a, b);
    }

    #[test]
    fn eval_peaks_at_mean(p in gaussian(), x in vec3(-2.0, 2.0)) {
        prop_assert!(p.eval(&x).unwrap() <= p.alpha);
        prop_assert_eq!(p.eval(&p.mu).unwrap(), p.alpha);
    }

    #[test]
    fn generated_primitives_validate(s in scene(6)) {
        prop_assert!(validate_scene(&s).is_empty());
    }

    #[test]
    fn bounds_enclose_three_sigma(s in scene(6)) {
        let b = s.bounds();
        for g in s.gaussians() {
            let r = 3.0 * g.max_eigenvalue().sqrt();
            for k in 0..3 {
                prop_assert!(g.mu[k] - r >= b.min[k] - 1e-12 && g.mu[k] + r <= b.max[k] + 1e-12);
            }
        }
        prop_assert!(s.radius() > 0.0);
    }

    #[test]
    fn scene_json_round_trip(s in scene(5)) {
        let back = Scene::from_json_str(&s.to_json_string()).unwrap();
        prop_assert_eq!(back.gaussians().len(), s.len());
        for (a, b) in back.gaussians().iter().zip(s.gaussians()) {
            prop_assert_eq!(a, b);
        }
        prop_assert_eq!(back.background, s.background);
    }

    #[test]
    fn orbit_cameras_on_sphere_facing_center(
        center in vec3(-5.0, 5.0),
        radius in 0.5f64..20.0,
        n in 1usize..40,
        elevation in -1.4f64..1.4,
        fib in any::<bool>(),
    ) {
        let mode = if fib { OrbitMode::FibonacciSphere } else { OrbitMode::Ring };
        let cams = make_orbit_cameras(center, radius, n, elevation, mode, 8, 8, 0.8).unwrap();
        prop_assert_eq!(cams.len(), n);
        for c in &cams {
            let to = center - c.position;
            prop_assert!((to.norm() - radius).abs() <= 1e-9 * radius.max(1.0));
            prop_assert!((c.forward.dot(&to) - to.norm()).abs() <= 1e-9 * radius.max(1.0));
            prop_assert!(c.is_orthonormal());
            prop_assert!((c.forward.cross(&c.up) - c.right).norm() < 1e-9);
        }
    }
}

#[test]
fn eval_examples() {
    let p = Gaussian::isotropic(Vec3::new(1.0, 2.0, 3.0), 0.5, 1.0, Vec3::zeros());
    for axis in [Vec3::x(), Vec3::y(), Vec3::z()] {
        assert_close(p.eval(&(p.mu + axis * 0.5)).unwrap(), (-0.5f64).exp(), 1e-15, "one sigma");
    }
    assert_close((-0.5f64).exp(), 0.6065, 1e-4, "e^-0.5");
    let half = Gaussian { alpha: 0.5, ..p.clone() };
    assert_eq!(half.eval(&half.mu).unwrap(), 0.5);
    let singular = Gaussian { cov: splat360::Mat3::from_diagonal(&Vec3::new(1.0, 1.0, 1e-14)), ..p };
    assert!(singular.eval(&Vec3::zeros()).is_err());
}

#[test]
fn violation_names() {
    let good = Gaussian::isotropic(Vec3::zeros(), 0.2, 0.5, Vec3::repeat(0.5));
    assert!(validate_scene(&Scene::new(vec![good.clone()], Vec3::zeros())).is_empty());

    let bad_g = Gaussian { g: 1.5, ..good.clone() };
    let v = validate_scene(&Scene::new(vec![good.clone(), bad_g], Vec3::zeros()));
    assert_eq!(v.len(), 1);
    assert_eq!((v[0].index, v[0].rule), (1, "g out of range"));

    let mut cov = good.cov;
    cov[(0, 1)] += 0.01;
    let v = validate_scene(&Scene::new(vec![Gaussian { cov, ..good }], Vec3::zeros()));
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].rule, "cov not symmetric");
}

#[test]
fn scene_json_rejects_unknown_keys() {
    let text = r#"{"background":[0,0,0],"gaussians":[],"extra":1}"#;
    assert!(Scene::from_json_str(text).is_err());
    let text = r#"{"background":[0,0,0],"gaussians":[{"mu":[0,0,0],"cov":[1,0,0,1,0,1],"alpha":1,"l_iso":[0,0,0],"l_aniso":[0,0,0],"normal":[0,0,1],"g":0,"bogus":2}]}"#;
    assert!(Scene::from_json_str(text).is_err());
}

#[test]
fn ring_examples() {
    let cams = make_orbit_cameras(Vec3::zeros(), 2.0, 4, 0.0, OrbitMode::Ring, 8, 8, 0.8).unwrap();
    let expect = [Vec3::x(), Vec3::z(), -Vec3::x(), -Vec3::z()];
    for (c, e) in cams.iter().zip(expect) {
        assert!((c.position - e * 2.0).norm() < 1e-12);
        assert!((c.forward + e).norm() < 1e-12);
    }
    let ring = make_orbit_cameras(Vec3::zeros(), 1.0, 360, 0.0, OrbitMode::Ring, 8, 8, 0.8).unwrap();
    for pair in ring.windows(2) {
        let angle = pair[0].position.angle(&pair[1].position);
        assert_close(angle, 1f64.to_radians(), 1e-9, "arc step");
    }
    assert!(make_orbit_cameras(Vec3::zeros(), 1.0, 0, 0.0, OrbitMode::Ring, 8, 8, 0.8).is_err());
}

#[test]
fn camera_json_round_trip() {
    let c = Camera::look_at(Vec3::new(1.0, 2.0, 3.0), Vec3::zeros(), Vec3::y(), 0.7, 32, 24);
    let back = Camera::from_json_str(&c.to_json_string()).unwrap();
    assert_eq!(back, c);
}
