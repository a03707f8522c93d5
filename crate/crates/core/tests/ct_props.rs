mod common;

use common::*;
use proptest::prelude::*;
use splat360::ct::*;
use splat360::{ImageKind, Ray, Vec3};

fn water_cube(side_mm: f64, n: usize) -> VoxelVolume {
    VoxelVolume::centered([n; 3], Vec3::repeat(side_mm / n as f64), Vec3::zeros(), 0.0).unwrap()
}

fn random_volume() -> impl Strategy<Value = VoxelVolume> {
    (2usize..6, 2usize..6, 2usize..6, 0.5f64..3.0).prop_flat_map(|(nx, ny, nz, sp)| {
        prop::collection::vec(-1000.0f64..2000.0, nx * ny * nz).prop_map(move |hu| {
            VoxelVolume::new([nx, ny, nz], Vec3::repeat(sp), Vec3::new(-1.0, -2.0, 0.5), hu).unwrap()
        })
    })
}

fn ray_through(vol: &VoxelVolume) -> impl Strategy<Value = Ray> {
    let c = vol.center();
    (unit_vec3(), vec3(-0.5, 0.5)).prop_map(move |(d, off)| Ray::new(c - d * 50.0 + off, d))
}

#[test]
fn hounsfield_examples_exact() {
    let mw = 0.02;
    assert_eq!(hu_to_mu(-1000.0, mw), 0.0);
    assert_eq!(hu_to_mu(0.0, mw), mw);
    assert_eq!(hu_to_mu(1000.0, mw), 2.0 * mw);
    assert_eq!(hu_to_mu(1000.0, 0.02), 0.04);
    assert_eq!(hu_to_mu(-1024.0, mw), 0.0);
}

proptest! {
    #[test]
    fn hounsfield_affine_above_air(a in -1000.0f64..3000.0, b in -1000.0f64..3000.0, mw in 0.001f64..0.1) {
        let mid = hu_to_mu((a + b) / 2.0, mw);
        prop_assert!((mid - (hu_to_mu(a, mw) + hu_to_mu(b, mw)) / 2.0).abs() <= 1e-15);
        prop_assert!(hu_to_mu(a, mw) >= 0.0);
    }

    #[test]
    fn composability_on_shared_grid(vol in random_volume(), seed in 0u64..1000) {
        let c = vol.center();
        let d = Vec3::new((seed as f64).sin(), (seed as f64 * 1.7).cos(), 0.4).normalize();
        let ray = Ray::new(c - d * 40.0, d);
        let (lo, hi) = vol.bounds();
        let (t0, t1) = clip_to_box(&ray, &lo, &hi).unwrap();
        let n = 64;
        let m = 1 + (seed as usize % (n - 1));
        let ds = (t1 - t0) / n as f64;
        let tm = t0 + m as f64 * ds;
        let whole = integrate_segment(&vol, &ray, t0, t1, n, 0.02);
        let parts = integrate_segment(&vol, &ray, t0, tm, m, 0.02) + integrate_segment(&vol, &ray, tm, t1, n - m, 0.02);
        prop_assert!((whole - parts).abs() <= 1e-9, "{} vs {}", whole, parts);
    }

    #[test]
    fn intensity_monotone_in_every_voxel(
        (vol, ray) in random_volume().prop_flat_map(|v| { let r = ray_through(&v); (Just(v), r) }),
        pick in any::<prop::sample::Index>(),
        bump in 0.0f64..500.0,
    ) {
        let cfg = DrrConfig::default();
        let (i_before, _) = beer_lambert_ray(&vol, &ray, &cfg);
        let mut denser = vol.clone();
        let k = pick.index(denser.hu.len());
        denser.hu[k] += bump;
        let (i_after, _) = beer_lambert_ray(&denser, &ray, &cfg);
        prop_assert!(i_after <= i_before);
        prop_assert!(i_before > 0.0 && i_before <= cfg.i0);
    }
}

#[test]
fn sample_hu_examples() {
    let mut vol = VoxelVolume::filled([2, 1, 1], Vec3::repeat(1.0), Vec3::zeros(), 0.0).unwrap();
    vol.hu[1] = 100.0;
    assert_eq!(sample_hu(&vol, &Vec3::zeros()), 0.0);
    assert_eq!(sample_hu(&vol, &Vec3::new(1.0, 0.0, 0.0)), 100.0);
    assert_eq!(sample_hu(&vol, &Vec3::new(0.5, 0.0, 0.0)), 50.0);
    assert_eq!(sample_hu(&vol, &Vec3::new(5.0, 0.0, 0.0)), AIR_HU);
}

#[test]
fn air_volume_is_transparent() {
    let vol = VoxelVolume::centered([8; 3], Vec3::repeat(2.0), Vec3::zeros(), AIR_HU).unwrap();
    let geom = ProjectionGeometry::cone_beam_z(Vec3::zeros(), 100.0, 100.0, 12, 10, 1.0);
    let cfg = DrrConfig { i0: 3.5, ..Default::default() };
    let img = render_drr(&vol, &geom, &cfg).unwrap();
    assert!(img.data.iter().all(|&v| v == 3.5));
    let li = render_drr(&vol, &geom, &DrrConfig { output: DrrOutput::LineIntegral, ..cfg }).unwrap();
    assert_eq!(li.kind, ImageKind::LineIntegral);
    assert!(li.data.iter().all(|&v| v == 0.0));
}

#[test]
fn missing_ray_sees_source_intensity() {
    let vol = water_cube(10.0, 4);
    let ray = Ray::new(Vec3::new(100.0, 100.0, 0.0), Vec3::x());
    assert_eq!(beer_lambert_ray(&vol, &ray, &DrrConfig::default()), (1.0, 0.0));
}

#[test]
fn slab_matches_closed_form() {
    let vol = water_cube(100.0, 40);
    let cfg = DrrConfig { mu_water: 0.01, ..Default::default() };
    let ray = Ray::new(Vec3::new(0.3, -0.7, -200.0), Vec3::z());
    let (i, li) = beer_lambert_ray(&vol, &ray, &cfg);
    let expect = (-1.0f64).exp();
    assert!((i / expect - 1.0).abs() < 5e-3, "{i} vs {expect}");
    assert!((expect - 0.3679).abs() < 1e-4);

    let half = DrrConfig { step_mm: Some(cfg.step_for(&vol) / 2.0), ..cfg };
    let (_, li_half) = beer_lambert_ray(&vol, &ray, &half);
    assert!(((li - li_half) / li).abs() < 1e-3);
}

#[test]
fn step_refinement_converges_first_order_or_better() {
    let vol = water_sphere_phantom(32, 2.0, 24.0).unwrap();
    let ray = Ray::new(Vec3::new(3.1, -2.2, -100.0), Vec3::new(0.05, 0.02, 1.0));
    let li = |step: f64| beer_lambert_ray(&vol, &ray, &DrrConfig { step_mm: Some(step), ..Default::default() }).1;
    let e1 = (li(1.0) - li(0.5)).abs();
    let e2 = (li(0.5) - li(0.25)).abs();
    let e3 = (li(0.25) - li(0.125)).abs();
    assert!(e2 <= e1 * 0.75 + 1e-12 && e3 <= e2 * 0.75 + 1e-12, "{e1} {e2} {e3}");
}

#[test]
fn sphere_central_chord_and_symmetry() {
    let (n, spacing, radius) = (64, 1.0, 25.0);
    let vol = water_sphere_phantom(n, spacing, radius).unwrap();
    let cfg = DrrConfig::default();
    let (det, px) = (33, 1.0);
    let geom = ProjectionGeometry::cone_beam_z(vol.center(), 500.0, 100.0, det, det, px);
    let img = render_drr(&vol, &geom, &cfg).unwrap();
    let center = img.get(det / 2, det / 2, 0);
    let expect = (-cfg.mu_water * 2.0 * radius).exp();
    assert!((center / expect - 1.0).abs() < 0.01, "{center} vs {expect}");
    // 90-degree rotations and mirrors of the detector grid
    for r in 0..det {
        for c in 0..det {
            let v = img.get(r, c, 0);
            for (rr, cc) in [(c, r), (det - 1 - r, c), (r, det - 1 - c), (det - 1 - c, det - 1 - r)] {
                let w = img.get(rr, cc, 0);
                assert!((v - w).abs() <= 0.01 * v.max(w), "({r},{c}) {v} vs ({rr},{cc}) {w}");
            }
        }
    }
}

#[test]
fn sphere_chords_follow_impact_parameter() {
    let (radius, mu) = (25.0, 0.02);
    let vol = water_sphere_phantom(64, 1.0, radius).unwrap();
    let c = vol.center();
    for b in [0.0, 5.0, 10.0, 15.0, 20.0] {
        let ray = Ray::new(c + Vec3::new(b, 0.0, -100.0), Vec3::z());
        let (i, _) = beer_lambert_ray(&vol, &ray, &DrrConfig::default());
        let expect = (-mu * 2.0 * (radius * radius - b * b).sqrt()).exp();
        assert!((i / expect - 1.0).abs() < 0.01, "b = {b}: {i} vs {expect}");
    }
}

#[test]
fn volume_files_round_trip_and_reject_bad_lengths() {
    let dir = tempfile::tempdir().unwrap();
    let mut vol = VoxelVolume::filled([3, 2, 2], Vec3::new(0.5, 1.0, 2.0), Vec3::new(1.0, 2.0, 3.0), 0.0).unwrap();
    for (i, h) in vol.hu.iter_mut().enumerate() {
        *h = i as f64 * 100.0 - 1000.0;
    }
    let header = dir.path().join("v.txt");
    vol.save(&header, "v.raw").unwrap();
    assert_eq!(VoxelVolume::load(&header).unwrap(), vol);

    std::fs::write(dir.path().join("v.raw"), vec![0u8; 10]).unwrap();
    let msg = VoxelVolume::load(&header).unwrap_err().to_string();
    assert!(msg.contains("expected 24 bytes") && msg.contains("found 10"), "{msg}");

    let bad = "dims=1 1 1\nspacing=1 1 1\norigin=0 0 0\ndata=v.raw\ndtype=float32\n";
    assert!(VolumeHeader::parse(bad).is_err());
    let unknown = "dims=1 1 1\nspacing=1 1 1\norigin=0 0 0\ndata=v.raw\ndtype=int16le\ncolor=red\n";
    assert!(VolumeHeader::parse(unknown).is_err());
}

#[test]
fn drr_worker_count_independent() {
    let vol = water_sphere_phantom(24, 2.0, 18.0).unwrap();
    let geom = ProjectionGeometry::cone_beam_z(vol.center(), 200.0, 80.0, 21, 17, 2.0);
    let cfg = DrrConfig::default();
    let one = splat360::render::with_workers(1, || render_drr(&vol, &geom, &cfg).unwrap());
    let many = splat360::render::with_workers(4, || render_drr(&vol, &geom, &cfg).unwrap());
    assert_eq!(one, many);
}
