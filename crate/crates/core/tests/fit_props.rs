mod common;

use common::*;
use proptest::prelude::*;
use splat360::check::check_render_appearance;
use splat360::fit::*;
use splat360::fusion::MlpParams;
use splat360::{make_orbit_cameras, validate_scene, Camera, Error, OrbitMode, RenderConfig, Scene, Vec3};

fn views(scene: &Scene, n: usize, size: usize) -> Vec<Camera> {
    make_orbit_cameras(scene.center(), 3.5, n, 0.3, OrbitMode::Ring, size, size, 0.9).unwrap()
}

fn small_cfg(iters: usize) -> FitConfig {
    FitConfig { lr: 0.02, iters, ray_budget: 4 * 144, patch_size: 12, trace_every: 10, ..Default::default() }
}

#[test]
fn fit_is_deterministic() {
    let gt = toy_scene(6, 4);
    let rcfg = RenderConfig::default();
    let targets = targets_from_scene(&gt, &views(&gt, 3, 24), &rcfg).unwrap();
    let init = perturb_appearance(&gt, 0.2, 5);
    let cfg = small_cfg(15);
    let a = fit_scene(&init, &targets, &cfg, &rcfg, None).unwrap();
    let b = fit_scene(&init, &targets, &cfg, &rcfg, None).unwrap();
    assert_eq!(a.scene.to_json_string(), b.scene.to_json_string());
    assert_eq!(a.report.loss_trace, b.report.loss_trace);
    assert_eq!(a.report.full_loss_trace, b.report.full_loss_trace);

    let other = fit_scene(&init, &targets, &FitConfig { seed: 1, ..cfg }, &rcfg, None).unwrap();
    assert_ne!(a.report.loss_trace, other.report.loss_trace);
}

#[test]
fn self_fit_has_zero_loss_and_does_not_move() {
    let gt = toy_scene(5, 8);
    let rcfg = RenderConfig::default();
    let targets = targets_from_scene(&gt, &views(&gt, 2, 24), &rcfg).unwrap();
    let out = fit_scene(&gt, &targets, &small_cfg(1), &rcfg, None).unwrap();
    assert_eq!(out.report.loss_trace, vec![0.0]);
    assert_eq!(out.scene.gaussians(), gt.gaussians());
    assert_eq!(out.report.final_loss, 0.0);
}

#[test]
fn fitting_reduces_loss_on_perturbed_toy() {
    let gt = toy_scene(8, 3);
    let rcfg = RenderConfig::default();
    let targets = targets_from_scene(&gt, &views(&gt, 4, 32), &rcfg).unwrap();
    let init = perturb_appearance(&gt, 0.2, 2);
    let before = fit_scene(&init, &targets, &small_cfg(0), &rcfg, None).unwrap().report;
    let after = fit_scene(&init, &targets, &small_cfg(120), &rcfg, None).unwrap().report;
    assert!(after.final_loss < before.final_loss * 0.1, "{} -> {}", before.final_loss, after.final_loss);
    assert!(after.mean_psnr > before.mean_psnr + 10.0);
    assert_eq!(after.iterations, 120);
    assert_eq!(after.loss_trace.len(), 120);
    assert_eq!(after.full_loss_trace.last().unwrap().iteration, 120);
}

#[test]
fn dual_branch_fits_mlp_and_ablation_drops_it() {
    let gt = toy_scene(4, 6);
    let rcfg = RenderConfig::default();
    let targets = targets_from_scene(&gt, &views(&gt, 2, 24), &rcfg).unwrap();
    let mlp = MlpParams::init(16, 3);
    let cfg = small_cfg(5);
    let out = fit_scene(&gt, &targets, &cfg, &rcfg, Some(&mlp)).unwrap();
    let fitted = out.mlp.expect("mlp kept");
    assert_ne!(fitted, mlp);
    assert_eq!(out.report.parameters, 4 * APPEARANCE_PARAMS + mlp.num_params());

    let mut ablated = cfg.clone();
    ablated.ablation.insert(Ablation::NoDualBranch);
    let out = fit_scene(&gt, &targets, &ablated, &rcfg, Some(&mlp)).unwrap();
    assert!(out.mlp.is_none());
    assert_eq!(out.report.parameters, 4 * APPEARANCE_PARAMS);
}

#[test]
fn geometry_fit_keeps_covariances_valid() {
    let gt = toy_scene(3, 9);
    let rcfg = RenderConfig::default();
    let targets = targets_from_scene(&gt, &views(&gt, 2, 24), &rcfg).unwrap();
    let init = perturb_appearance(&gt, 0.1, 1);
    let cfg = FitConfig { optimize_geometry: true, ..small_cfg(4) };
    let out = fit_scene(&init, &targets, &cfg, &rcfg, None).unwrap();
    assert!(validate_scene(&out.scene).is_empty());
    assert_eq!(out.report.parameters, 3 * (APPEARANCE_PARAMS + GEOMETRY_PARAMS));
    assert!(out.scene.gaussians().iter().zip(init.gaussians()).any(|(a, b)| a.mu != b.mu));
}

#[test]
fn appearance_gradient_matches_finite_differences() {
    let r = check_render_appearance(7, 1e-3).unwrap();
    assert!(r.passed, "max error {}", r.max_error);
}

#[test]
fn appearance_gradient_is_zero_at_optimum() {
    let gt = toy_scene(4, 2);
    let rcfg = RenderConfig::default();
    let targets = targets_from_scene(&gt, &views(&gt, 2, 16), &rcfg).unwrap();
    let cfg = FitConfig { lambda_ssim: 0.2, ..Default::default() };
    let (loss, grad) = appearance_loss_and_gradient(&gt, &targets, &cfg, &rcfg).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(grad.len(), 4 * APPEARANCE_PARAMS);
    assert!(grad.iter().all(|&g| g == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn aggressive_steps_stay_in_valid_ranges(seed in 0u64..1000, lr in 0.5f64..20.0) {
        let gt = toy_scene(4, seed);
        let rcfg = RenderConfig::default();
        let targets = targets_from_scene(&gt, &views(&gt, 2, 16), &rcfg).unwrap();
        let init = perturb_appearance(&gt, 0.5, seed + 1);
        let cfg = FitConfig { lr, iters: 6, lambda_ssim: 0.0, ray_budget: 128, patch_size: 8, trace_every: 3, seed, ..Default::default() };
        let out = fit_scene(&init, &targets, &cfg, &rcfg, None).unwrap();
        prop_assert!(validate_scene(&out.scene).is_empty());
        for g in out.scene.gaussians() {
            prop_assert!(g.alpha > 0.0 && g.alpha <= 1.0);
            prop_assert!(g.g > -1.0 && g.g < 1.0);
            prop_assert!(g.l_iso.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(g.l_aniso.iter().all(|v| *v >= 0.0 && v.is_finite()));
        }
        prop_assert!(out.report.loss_trace.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn perturbation_stays_valid(seed in 0u64..1000, fraction in 0.0f64..0.9) {
        let s = perturb_appearance(&toy_scene(6, seed), fraction, seed);
        prop_assert!(validate_scene(&s).is_empty());
    }
}

#[test]
fn adam_converges_on_quadratic() {
    let cfg = AdamConfig { lr: 0.05, ..Default::default() };
    let target = [3.0, -1.5, 0.25];
    let mut p = vec![0.0; 3];
    let mut state = AdamState::new(3);
    for _ in 0..3000 {
        let g: Vec<f64> = p.iter().zip(target).map(|(x, t)| 2.0 * (x - t)).collect();
        adam_step(&mut p, &g, &mut state, &cfg).unwrap();
    }
    for (x, t) in p.iter().zip(target) {
        assert_close(*x, t, 1e-3, "adam minimum");
    }
    assert_eq!(state.t, 3000);
}

#[test]
fn adam_second_step_by_hand() {
    let cfg = AdamConfig::default();
    let mut p = vec![0.0];
    let mut s = AdamState::new(1);
    adam_step(&mut p, &[1.0], &mut s, &cfg).unwrap();
    adam_step(&mut p, &[-1.0], &mut s, &cfg).unwrap();
    // m = 0.9*0.1 - 0.1 = -0.01, v = 0.999*0.001 + 0.001
    let m_hat = -0.01 / (1.0 - 0.81);
    let v_hat = (0.999 * 0.001 + 0.001) / (1.0 - 0.999f64.powi(2));
    let first = -cfg.lr / (1.0 + cfg.epsilon);
    let expect = first - cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    assert_close(p[0], expect, 1e-18, "two steps");
}

#[test]
fn composite_loss_examples() {
    use splat360::{ImageBuffer, ImageKind};
    let a = ImageBuffer::filled(12, 12, 3, ImageKind::Radiance, 0.5);
    let b = ImageBuffer::filled(12, 12, 3, ImageKind::Radiance, 0.6);
    let (l, g) = composite_loss(&a, &b, 2.0, 0.0).unwrap();
    assert_close(l, 2.0 * 0.01, 1e-15, "scaled mse");
    assert!(g.data.iter().all(|&v| (v - 2.0 * 2.0 * -0.1 / 432.0).abs() < 1e-15));
    let (with_ssim, _) = composite_loss(&a, &b, 1.0, 0.2).unwrap();
    let s = splat360::metrics::ssim(&a, &b, &Default::default()).unwrap();
    assert_close(with_ssim, 0.01 + 0.2 * (1.0 - s), 1e-15, "ssim term");
    assert!(composite_loss(&a, &ImageBuffer::filled(12, 12, 3, ImageKind::Radiance, f64::NAN), 1.0, 0.0).is_err());
}

#[test]
fn setup_errors() {
    let s = toy_scene(2, 1);
    let rcfg = RenderConfig::default();
    let targets = targets_from_scene(&s, &views(&s, 1, 16), &rcfg).unwrap();
    let lpips = FitConfig { lambda_lpips: 0.1, ..Default::default() };
    assert!(matches!(fit_scene(&s, &targets, &lpips, &rcfg, None), Err(FitError::Setup(Error::Unsupported(_)))));
    assert!(matches!(fit_scene(&s, &[], &small_cfg(1), &rcfg, None), Err(FitError::Setup(Error::Argument(_)))));
    let tiny_patch = FitConfig { patch_size: 8, ..Default::default() };
    assert!(tiny_patch.validate().is_err());
    let mut bad = s.clone();
    bad.update(|gs| gs[0].alpha = 2.0);
    assert!(fit_scene(&bad, &targets, &small_cfg(1), &rcfg, None).is_err());
}

#[test]
fn config_json_is_strict() {
    let cfg: FitConfig = serde_json::from_str(r#"{"iters": 5, "ablation": ["no_anisotropy"]}"#).unwrap();
    assert_eq!(cfg.iters, 5);
    assert!(cfg.has(Ablation::NoAnisotropy));
    assert_eq!(cfg.lr, FitConfig::default().lr);
    assert!(serde_json::from_str::<FitConfig>(r#"{"iterations": 5}"#).is_err());
    let rc = cfg.effective_render_config(&RenderConfig::default());
    assert!(!rc.anisotropy_enabled && rc.disentangle);
}

#[test]
fn toy_scene_is_valid_and_inside_unit_ball() {
    let s = toy_scene(20, 1);
    assert_eq!(s.len(), 20);
    assert!(validate_scene(&s).is_empty());
    assert!(s.gaussians().iter().all(|g| g.mu.norm() <= 1.0 && g.l_aniso.iter().all(|v| *v > 0.0)));
    assert_eq!(s.background, Vec3::new(0.05, 0.05, 0.08));
}
