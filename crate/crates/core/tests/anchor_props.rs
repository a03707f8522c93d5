mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splat360::anchor::*;
use splat360::{render, Camera, Gaussian, ImageBuffer, ImageKind, RenderConfig, Scene, Vec3};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn image_strategy() -> impl Strategy<Value = ImageBuffer> {
    (3usize..14, 3usize..14).prop_flat_map(|(w, h)| {
        prop::collection::vec(0.0f64..5.0, w * h)
            .prop_map(move |d| ImageBuffer::from_data(w, h, 1, ImageKind::Depth, d).unwrap())
    })
}

proptest! {
    #[test]
    fn anchor_set_invariants(grad in image_strategy(), k in 1usize..20, radius in 0.0f64..4.0, beta in -3.0f64..3.0) {
        let set = select_anchors(&grad, k, radius, beta).unwrap();
        prop_assert!(!set.is_empty() && set.len() <= k);
        let total: f64 = set.anchors.iter().map(|a| a.prob).sum();
        prop_assert!((total - 1.0).abs() <= 1e-9);
        prop_assert!(set.anchors.iter().all(|a| a.prob >= 0.0));
        for pair in set.anchors.windows(2) {
            prop_assert!(pair[0].grad >= pair[1].grad);
        }
        for (i, a) in set.anchors.iter().enumerate() {
            for b in &set.anchors[i + 1..] {
                let d2 = (a.row as f64 - b.row as f64).powi(2) + (a.col as f64 - b.col as f64).powi(2);
                prop_assert!(d2 >= radius * radius);
            }
        }
    }

    #[test]
    fn beta_monotone_for_top_anchor(grad in image_strategy(), b1 in 0.01f64..3.0, extra in 0.01f64..3.0) {
        let lo = select_anchors(&grad, 8, 2.0, b1).unwrap();
        let hi = select_anchors(&grad, 8, 2.0, b1 + extra).unwrap();
        prop_assert!(hi.anchors[0].prob <= lo.anchors[0].prob + 1e-15);
    }

    #[test]
    fn gradient_commutes_with_transpose(depth in image_strategy()) {
        let a = depth_gradient(&depth.transposed()).unwrap();
        let b = depth_gradient(&depth).unwrap().transposed();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn gradient_non_negative(depth in image_strategy()) {
        prop_assert!(depth_gradient(&depth).unwrap().data.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn beta_zero_is_uniform(grad in image_strategy(), k in 1usize..10) {
        let set = select_anchors(&grad, k, 1.0, 0.0).unwrap();
        let u = 1.0 / set.len() as f64;
        prop_assert!(set.anchors.iter().all(|a| (a.prob - u).abs() < 1e-15));
    }
}

fn ramp_grad(w: usize, h: usize) -> ImageBuffer {
    let mut g = ImageBuffer::new(w, h, 1, ImageKind::Depth);
    for r in 0..h {
        for c in 0..w {
            g.set(r, c, 0, ((r * 31 + c * 17) % 13) as f64 * 0.3);
        }
    }
    g
}

#[test]
fn step_gradient_is_half_height() {
    let h = 3.0;
    let mut depth = ImageBuffer::new(10, 6, 1, ImageKind::Depth);
    for r in 0..6 {
        for c in 5..10 {
            depth.set(r, c, 0, h);
        }
    }
    let g = depth_gradient(&depth).unwrap();
    for r in 0..6 {
        assert_eq!(g.get(r, 4, 0), h / 2.0);
        assert_eq!(g.get(r, 5, 0), h / 2.0);
        assert_eq!(g.get(r, 3, 0), 0.0);
    }
}

#[test]
fn uniform_sampling_passes_chi_square() {
    let set = select_anchors(&ramp_grad(32, 32), 16, 3.0, 0.0).unwrap();
    let k = set.len();
    assert!(k >= 8);
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = vec![0usize; k];
    for j in sample_anchor_indices(&set, n, &mut rng) {
        counts[j] += 1;
    }
    let expect = n as f64 / k as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    let p = 1.0 - ChiSquared::new((k - 1) as f64).unwrap().cdf(stat);
    assert!(p > 0.01, "chi-square {stat} with {} dof, p = {p}", k - 1);
}

#[test]
fn weighted_sampling_matches_probabilities() {
    let set = select_anchors(&ramp_grad(24, 24), 6, 3.0, 1.5).unwrap();
    let n = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut counts = vec![0usize; set.len()];
    for j in sample_anchor_indices(&set, n, &mut rng) {
        counts[j] += 1;
    }
    let stat: f64 = counts
        .iter()
        .zip(&set.anchors)
        .map(|(&c, a)| (c as f64 - n as f64 * a.prob).powi(2) / (n as f64 * a.prob))
        .sum();
    let p = 1.0 - ChiSquared::new((set.len() - 1) as f64).unwrap().cdf(stat);
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn two_anchor_binomial_concentration() {
    let mut grad = ImageBuffer::filled(12, 1, 1, ImageKind::Depth, -1.0);
    grad.set(0, 2, 0, 0.0);
    grad.set(0, 9, 0, 1.0);
    let set = select_anchors(&grad, 2, 3.0, 0.0).unwrap();
    assert_eq!(set.len(), 2);
    let cam = Camera::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::zeros(), Vec3::y(), 0.8, 12, 1);
    let n = 10_000;
    let rays = sample_anchor_rays(&set, &cam, n, 5).unwrap();
    let first = cam.pixel_ray(0, set.anchors[0].col);
    let hits = rays.iter().filter(|r| **r == first).count() as f64;
    let bound = 3.0 * (n as f64 * 0.25).sqrt();
    assert!((hits - n as f64 / 2.0).abs() <= bound, "{hits}");
    assert_eq!(sample_anchor_rays(&set, &cam, n, 5).unwrap(), rays);
}

#[test]
fn literal_kernel_prefers_low_gradient_negative_beta_flips() {
    let mut grad = ImageBuffer::filled(9, 1, 1, ImageKind::Depth, -1.0);
    grad.set(0, 1, 0, 1.0);
    grad.set(0, 7, 0, 0.0);
    let pos = select_anchors(&grad, 2, 3.0, 1.0).unwrap();
    assert!((pos.anchors[1].prob - 0.7311).abs() < 1e-4);
    assert!((pos.anchors[0].prob - 0.2689).abs() < 1e-4);
    let neg = select_anchors(&grad, 2, 3.0, -1.0).unwrap();
    assert!(neg.anchors[0].prob > neg.anchors[1].prob);
}

#[test]
fn depth_edge_scene_puts_top_anchor_on_edge() {
    // near opaque slab covering the left half, far one covering the right
    let mut near = Gaussian::isotropic(Vec3::new(-1.0, 0.0, 1.0), 0.5, 1.0, Vec3::repeat(0.5));
    near.cov = splat360::Mat3::from_diagonal(&Vec3::new(0.6, 4.0, 0.01));
    let mut far = near.clone();
    far.mu = Vec3::new(1.0, 0.0, -1.0);
    let scene = Scene::new(vec![near, far], Vec3::zeros());
    let cam = Camera::look_at(Vec3::new(0.0, 0.0, 5.0), Vec3::zeros(), Vec3::y(), 0.5, 40, 30);
    let out = render(&scene, &cam, &RenderConfig::default()).unwrap();
    let grad = depth_gradient(&out.depth).unwrap();
    let set = select_anchors(&grad, 4, 5.0, 1.0).unwrap();
    let top = set.anchors[0];
    let max = grad.data.iter().copied().fold(0.0, f64::max);
    assert_eq!(top.grad, max);
    // the edge runs vertically through the image center
    assert!((top.col as i64 - 20).abs() <= 3, "top anchor at column {}", top.col);
}

#[test]
fn anchor_json_shape() {
    let set = select_anchors(&ramp_grad(8, 8), 3, 2.0, 0.5).unwrap();
    let v: serde_json::Value = serde_json::from_str(&set.to_json_string(11)).unwrap();
    assert_eq!(v["seed"], 11);
    assert_eq!(v["beta"], 0.5);
    assert_eq!(v["anchors"].as_array().unwrap().len(), 3);
    for key in ["row", "col", "grad", "prob"] {
        assert!(v["anchors"][0].get(key).is_some());
    }
}
