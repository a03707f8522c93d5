use std::fs;
use std::path::Path;

use serde_json::{json, Value};
use splat360::anchor::{depth_gradient, select_anchors};
use splat360::check::{run_gradcheck, GradcheckConfig};
use splat360::ct::{render_drr, DrrConfig, DrrOutput, ProjectionGeometry, VolumeHeader, VoxelVolume};
use splat360::fit::{fit_scene, FitConfig, FitError, FitReport, FitTarget};
use splat360::fusion::{render_fused, MlpParams, DEFAULT_EMBED_DIM};
use splat360::io::{parse_pfm, parse_ppm, pfm_bytes, ppm_bytes, Transfer};
use splat360::metrics::{benchmark_scene, measure_runtime, mse, psnr, ssim, HardwareInfo, SsimConfig};
use splat360::render::with_workers;
use splat360::{make_orbit_cameras, render, Camera, ImageBuffer, ImageKind, OrbitMode, RenderConfig, Scene};

use crate::error::CliError;
use crate::stage::{Inputs, Stage};
use crate::{
    AnchorArgs, BenchArgs, Cli, Command, DrrArgs, DrrOutputArg, FitArgs, GradcheckArgs, ImageFormat, InfoArgs,
    MetricsArgs, RenderArgs, RenderFlags, ViewArgs,
};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: &Cli) -> Result<()> {
    if cli.workers == Some(0) {
        return Err(CliError::argument("--workers must be at least 1"));
    }
    let workers = cli.workers.unwrap_or(0);
    match &cli.command {
        Command::Render(a) => with_workers(workers, || cmd_render(cli, a)),
        Command::Drr(a) => with_workers(workers, || cmd_drr(cli, a)),
        Command::Fit(a) => with_workers(workers, || cmd_fit(cli, a)),
        Command::Anchors(a) => with_workers(workers, || cmd_anchors(cli, a)),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Gradcheck(a) => with_workers(workers, || cmd_gradcheck(cli, a)),
        Command::Bench(a) => cmd_bench(cli, a),
        Command::Info(a) => cmd_info(cli, a),
    }
}

fn load_scene(path: &Path, inputs: &mut Inputs) -> Result<Scene> {
    let text = inputs.read_string(path)?;
    let scene = Scene::from_json_str(&text).map_err(|e| CliError::from(e).in_file(path))?;
    let violations = scene.validate();
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(CliError::format(format!("{}: invalid scene: {}", path.display(), list.join("; "))));
    }
    Ok(scene)
}

fn load_camera(path: &Path, inputs: &mut Inputs) -> Result<Camera> {
    let text = inputs.read_string(path)?;
    Camera::from_json_str(&text).map_err(|e| CliError::from(e).in_file(path))
}

fn parse_orbit(spec: &str) -> Result<(OrbitMode, usize)> {
    let bad = || CliError::argument(format!("--orbit {spec:?}: expected ring:N or fibonacci:N"));
    let (mode, n) = spec.split_once(':').ok_or_else(bad)?;
    let mode = match mode {
        "ring" => OrbitMode::Ring,
        "fibonacci" => OrbitMode::FibonacciSphere,
        _ => return Err(bad()),
    };
    Ok((mode, n.parse().map_err(|_| bad())?))
}

/// Cameras from files, or an orbit around the scene; also returns the
/// resolved view settings for the manifest.
fn resolve_views(view: &ViewArgs, scene: &Scene, inputs: &mut Inputs) -> Result<(Vec<Camera>, Value)> {
    if !view.cameras.is_empty() {
        let cams = view.cameras.iter().map(|p| load_camera(p, inputs)).collect::<Result<Vec<_>>>()?;
        let files: Vec<String> = view.cameras.iter().map(|p| p.display().to_string()).collect();
        return Ok((cams, json!({ "cameras": files })));
    }
    let (mode, n) = parse_orbit(&view.orbit)?;
    let radius = view.radius.unwrap_or(3.0 * scene.radius());
    let center = scene.center();
    let cams = make_orbit_cameras(center, radius, n, view.elevation, mode, view.width, view.height, view.fov)?;
    let resolved = json!({
        "orbit": { "mode": mode, "n": n, "center": [center.x, center.y, center.z], "radius": radius, "elevation": view.elevation },
        "width": view.width,
        "height": view.height,
        "fov_y": view.fov,
    });
    Ok((cams, resolved))
}

fn render_config(flags: &RenderFlags) -> Result<RenderConfig> {
    let cfg = RenderConfig {
        termination_epsilon: flags.epsilon,
        cutoff_sigma: flags.cutoff,
        disentangle: !flags.no_disentangle,
        anisotropy_enabled: !flags.no_anisotropy,
        ..Default::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_mlp(path: &Path, inputs: &mut Inputs) -> Result<MlpParams> {
    let bytes = inputs.read(path)?;
    MlpParams::from_bytes(&bytes).map_err(|e| CliError::from(e).in_file(path))
}

fn cmd_render(cli: &Cli, a: &RenderArgs) -> Result<()> {
    let mut inputs = Inputs::default();
    let scene = load_scene(&a.scene, &mut inputs)?;
    let rcfg = render_config(&a.flags)?;
    let (cams, view) = resolve_views(&a.view, &scene, &mut inputs)?;
    let mlp = a.mlp.as_deref().map(|p| load_mlp(p, &mut inputs)).transpose()?;

    let mut stage = Stage::new(&cli.out)?;
    for (i, cam) in cams.iter().enumerate() {
        let out = match &mlp {
            Some(m) => render_fused(&scene, cam, &rcfg, m, &scene.center(), scene.radius())?,
            None => render(&scene, cam, &rcfg)?,
        };
        stage.write(&format!("frame_{i:03}.ppm"), &ppm_bytes(&out.color, Transfer::Gamma))?;
        stage.write(&format!("frame_{i:03}.pfm"), &pfm_bytes(&out.color))?;
        stage.write(&format!("camera_{i:03}.json"), cam.to_json_string().as_bytes())?;
        if a.depth {
            stage.write(&format!("depth_{i:03}.pfm"), &pfm_bytes(&out.depth))?;
        }
        if a.transmittance {
            stage.write(&format!("transmittance_{i:03}.pfm"), &pfm_bytes(&out.transmittance))?;
        }
    }
    let config = json!({
        "scene": a.scene.display().to_string(),
        "view": view,
        "render": rcfg,
        "depth": a.depth,
        "transmittance": a.transmittance,
        "mlp": a.mlp.as_ref().map(|p| p.display().to_string()),
    });
    stage.commit("render", cli.seed, config, inputs)?;
    println!("rendered {} view(s) into {}", cams.len(), cli.out.display());
    Ok(())
}

fn cmd_drr(cli: &Cli, a: &DrrArgs) -> Result<()> {
    let mut inputs = Inputs::default();
    let header_text = inputs.read_string(&a.volume)?;
    let header = VolumeHeader::parse(&header_text).map_err(|e| CliError::from(e).in_file(&a.volume))?;
    let raw = a.volume.parent().unwrap_or(Path::new(".")).join(&header.data);
    inputs.record(&raw)?;
    let vol = VoxelVolume::load(&a.volume)?;

    let geom = ProjectionGeometry::cone_beam_z(
        vol.center(),
        a.source_distance,
        a.detector_distance,
        a.det_width,
        a.det_height,
        a.pixel_mm,
    );
    let output = match a.output {
        DrrOutputArg::Intensity => DrrOutput::Intensity,
        DrrOutputArg::LineIntegral => DrrOutput::LineIntegral,
    };
    let cfg = DrrConfig { mu_water: a.mu_water, i0: a.i0, step_mm: a.step_mm, output };
    let img = render_drr(&vol, &geom, &cfg)?;
    let format = a.format.unwrap_or(match output {
        DrrOutput::Intensity => ImageFormat::Ppm,
        DrrOutput::LineIntegral => ImageFormat::Pfm,
    });

    let mut stage = Stage::new(&cli.out)?;
    let name = match format {
        ImageFormat::Pfm => {
            stage.write("drr.pfm", &pfm_bytes(&img))?;
            "drr.pfm"
        }
        ImageFormat::Ppm => {
            // 8-bit export maps I0 (or the largest line integral) to white
            let scale = match output {
                DrrOutput::Intensity => a.i0,
                DrrOutput::LineIntegral => img.data.iter().copied().fold(0.0, f64::max),
            };
            let mut shown = img.clone();
            if scale > 0.0 {
                shown.data.iter_mut().for_each(|v| *v /= scale);
            }
            stage.write("drr.ppm", &ppm_bytes(&shown, Transfer::Linear))?;
            "drr.ppm"
        }
    };
    let config = json!({
        "volume": a.volume.display().to_string(),
        "geometry": {
            "source": geom.source.as_slice(),
            "detector_center": geom.detector_center.as_slice(),
            "detector_u": geom.detector_u.as_slice(),
            "detector_v": geom.detector_v.as_slice(),
            "det_width": geom.det_width,
            "det_height": geom.det_height,
        },
        "drr": cfg,
        "step_mm_used": cfg.step_for(&vol),
        "format": format!("{format:?}").to_lowercase(),
    });
    stage.commit("drr", cli.seed, config, inputs)?;
    let c = img.get(a.det_height / 2, a.det_width / 2, 0);
    println!("wrote {} ({}x{}), center pixel {c:.6}", cli.out.join(name).display(), a.det_width, a.det_height);
    Ok(())
}

/// `camera_NNN.json` files in `dir` paired with `frame_NNN.pfm`, or
/// `frame_NNN.ppm` when no PFM exists.
fn load_targets(dir: &Path, inputs: &mut Inputs) -> Result<Vec<FitTarget>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut ids: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let id = name.strip_prefix("camera_")?.strip_suffix(".json")?;
            Some(id.to_string())
        })
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(CliError::argument(format!("{}: no camera_NNN.json files", dir.display())));
    }
    let mut targets = Vec::with_capacity(ids.len());
    for id in ids {
        let camera = load_camera(&dir.join(format!("camera_{id}.json")), inputs)?;
        let pfm = dir.join(format!("frame_{id}.pfm"));
        let ppm = dir.join(format!("frame_{id}.ppm"));
        let image = if pfm.exists() {
            let bytes = inputs.read(&pfm)?;
            parse_pfm(&bytes, ImageKind::Radiance).map_err(|e| CliError::from(e).in_file(&pfm))?
        } else {
            let bytes = inputs.read(&ppm)?;
            parse_ppm(&bytes, Transfer::Gamma, ImageKind::Radiance).map_err(|e| CliError::from(e).in_file(&ppm))?
        };
        if image.width != camera.width || image.height != camera.height || image.channels != 3 {
            return Err(CliError::format(format!(
                "frame_{id}: {}x{}x{} image does not match the {}x{} RGB camera",
                image.width, image.height, image.channels, camera.width, camera.height
            )));
        }
        targets.push(FitTarget { camera, image });
    }
    Ok(targets)
}

fn fit_config(cli: &Cli, a: &FitArgs, inputs: &mut Inputs) -> Result<FitConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = inputs.read_string(p)?;
            serde_json::from_str(&text).map_err(|e| CliError::from(e).in_file(p))?
        }
        None => FitConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = a.$field { cfg.$field = v; })*
        };
    }
    set!(iters, lr, lambda_mse, lambda_ssim, lambda_lpips, ray_budget, patch_size, anchor_fraction, anchor_beta, trace_every);
    cfg.ablation.extend(a.ablation.iter().copied());
    cfg.optimize_geometry |= a.optimize_geometry;
    cfg.seed = cli.seed;
    cfg.validate()?;
    Ok(cfg)
}

fn report_json(report: &FitReport) -> Value {
    let mut v = serde_json::to_value(report).expect("report serializes");
    v.as_object_mut().expect("object").remove("seconds");
    v
}

fn views_table(report: &FitReport) -> String {
    let mut s = String::from("view\tpsnr_db\tssim\tloss\n");
    for v in &report.views {
        s.push_str(&format!("{}\t{:.4}\t{:.6}\t{:.6e}\n", v.view, v.psnr, v.ssim, v.loss));
    }
    s.push_str(&format!("mean\t{:.4}\t{:.6}\t{:.6e}\n", report.mean_psnr, report.mean_ssim, report.final_loss));
    s
}

fn cmd_fit(cli: &Cli, a: &FitArgs) -> Result<()> {
    let mut inputs = Inputs::default();
    let scene = load_scene(&a.scene, &mut inputs)?;
    let targets = load_targets(&a.targets, &mut inputs)?;
    let cfg = fit_config(cli, a, &mut inputs)?;
    let rcfg = render_config(&a.flags)?;
    let mlp = match &a.mlp {
        Some(p) => Some(load_mlp(p, &mut inputs)?),
        None if a.mlp_init => Some(MlpParams::init(DEFAULT_EMBED_DIM, cli.seed)),
        None => None,
    };

    let config = json!({
        "scene": a.scene.display().to_string(),
        "targets": a.targets.display().to_string(),
        "views": targets.len(),
        "fit": cfg,
        "render": rcfg,
        "mlp": a.mlp.as_ref().map(|p| p.display().to_string()),
        "mlp_init": a.mlp_init,
    });
    let mut stage = Stage::new(&cli.out)?;
    match fit_scene(&scene, &targets, &cfg, &rcfg, mlp.as_ref()) {
        Ok(outcome) => {
            let r = &outcome.report;
            stage.write("scene.json", outcome.scene.to_json_string().as_bytes())?;
            if let Some(m) = &outcome.mlp {
                stage.write("mlp.bin", &m.to_bytes())?;
            }
            stage.write_json("report.json", &report_json(r))?;
            stage.write("views.tsv", views_table(r).as_bytes())?;
            stage.write_unhashed("timing.json", format!("{}\n", json!({ "seconds": r.seconds })).as_bytes())?;
            stage.commit("fit", cli.seed, config, inputs)?;
            print!("{}", views_table(r));
            println!(
                "{} iterations, first batch loss {:.6e}, final loss {:.6e}, {:.2} s",
                r.iterations,
                r.loss_trace.first().copied().unwrap_or(f64::NAN),
                r.final_loss,
                r.seconds
            );
            Ok(())
        }
        Err(FitError::NonFinite { iteration, report }) => {
            stage.write_json("report.json", &report_json(&report))?;
            stage.salvage(&["report.json"])?;
            Err(CliError::numeric(format!(
                "loss became non-finite at iteration {iteration}; partial report in {}",
                cli.out.join("report.json").display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_anchors(cli: &Cli, a: &AnchorArgs) -> Result<()> {
    let mut inputs = Inputs::default();
    let scene = load_scene(&a.scene, &mut inputs)?;
    let rcfg = render_config(&a.flags)?;
    let (cams, view) = resolve_views(&a.view, &scene, &mut inputs)?;
    if a.k == 0 {
        return Err(CliError::argument("--k must be at least 1"));
    }
    let mut stage = Stage::new(&cli.out)?;
    for (i, cam) in cams.iter().enumerate() {
        let out = render(&scene, cam, &rcfg)?;
        let grad = depth_gradient(&out.depth)?;
        let set = select_anchors(&grad, a.k, a.suppression, a.beta)?;
        stage.write(&format!("anchors_{i:03}.json"), set.to_json_string(cli.seed).as_bytes())?;
        stage.write(&format!("grad_{i:03}.pfm"), &pfm_bytes(&grad))?;
        stage.write(&format!("depth_{i:03}.pfm"), &pfm_bytes(&out.depth))?;
        stage.write(&format!("camera_{i:03}.json"), cam.to_json_string().as_bytes())?;
        if let Some(top) = set.anchors.first() {
            println!("view {i}: {} anchors, top at row {} col {} (grad {:.4})", set.len(), top.row, top.col, top.grad);
        }
    }
    let config = json!({
        "scene": a.scene.display().to_string(),
        "view": view,
        "render": rcfg,
        "k": a.k,
        "beta": a.beta,
        "suppression_radius": a.suppression,
    });
    stage.commit("anchors", cli.seed, config, inputs)?;
    Ok(())
}

fn read_any_image(path: &Path) -> Result<ImageBuffer> {
    splat360::io::read_image(path).map_err(|e| CliError::from(e).in_file(path))
}

fn cmd_metrics(a: &MetricsArgs) -> Result<()> {
    let x = read_any_image(&a.a)?;
    let y = read_any_image(&a.b)?;
    let m = mse(&x, &y)?;
    let p = psnr(&x, &y)?;
    let cfg = SsimConfig::default();
    let s = if x.width >= cfg.window && x.height >= cfg.window { Some(ssim(&x, &y, &cfg)?) } else { None };
    let out = json!({
        "a": a.a.display().to_string(),
        "b": a.b.display().to_string(),
        "mse": m,
        "psnr_db": p,
        "ssim": s,
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("json"));
    Ok(())
}

fn cmd_gradcheck(cli: &Cli, a: &GradcheckArgs) -> Result<()> {
    let cfg = GradcheckConfig { seed: cli.seed, tol: a.tol, render_tol: a.render_tol, draws: a.draws };
    let results = run_gradcheck(&cfg)?;
    let mut failed = Vec::new();
    for r in &results {
        println!(
            "{} {:<24} max error {:.3e} (tolerance {:.0e}, {} components)",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.max_error,
            r.tolerance,
            r.components
        );
        if !r.passed {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::check(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn cmd_bench(cli: &Cli, a: &BenchArgs) -> Result<()> {
    let mut inputs = Inputs::default();
    let scene = match &a.scene {
        Some(p) => load_scene(p, &mut inputs)?,
        None => benchmark_scene(a.gaussians, cli.seed),
    };
    if a.frames == 0 || a.res == 0 {
        return Err(CliError::argument("--frames and --res must be positive"));
    }
    let cams = make_orbit_cameras(
        scene.center(),
        3.0 * scene.radius(),
        a.frames,
        0.3,
        OrbitMode::Ring,
        a.res,
        a.res,
        0.9,
    )?;
    let rcfg = RenderConfig::default();
    let workers = cli.workers.unwrap_or_else(|| HardwareInfo::detect().logical_cores);
    let report = measure_runtime(&scene, &cams, &rcfg, workers)?;
    let baseline = a.baseline_workers.map(|w| measure_runtime(&scene, &cams, &rcfg, w)).transpose()?;
    let speedup = baseline.as_ref().map(|b| b.ms_per_frame / report.ms_per_frame);
    let out = json!({ "report": report, "baseline": baseline, "speedup": speedup });

    let mut stage = Stage::new(&cli.out)?;
    let mut text = serde_json::to_string_pretty(&out).expect("json");
    text.push('\n');
    stage.write_unhashed("bench.json", text.as_bytes())?;
    let config = json!({
        "scene": a.scene.as_ref().map(|p| p.display().to_string()),
        "gaussians": scene.len(),
        "res": a.res,
        "frames": a.frames,
        "workers": workers,
        "baseline_workers": a.baseline_workers,
        "render": rcfg,
    });
    stage.commit("bench", cli.seed, config, inputs)?;
    print!("{text}");
    Ok(())
}

fn cmd_info(cli: &Cli, a: &InfoArgs) -> Result<()> {
    let scene = match &a.scene {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            let s = Scene::from_json_str(&text).map_err(|e| CliError::from(e).in_file(p))?;
            let b = s.bounds();
            let c = s.center();
            Some(json!({
                "path": p.display().to_string(),
                "gaussians": s.len(),
                "background": s.background.as_slice(),
                "bounds_min": b.min.as_slice(),
                "bounds_max": b.max.as_slice(),
                "center": [c.x, c.y, c.z],
                "radius": s.radius(),
                "violations": s.validate().iter().map(|v| v.to_string()).collect::<Vec<_>>(),
            }))
        }
        None => None,
    };
    let out = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "hardware": HardwareInfo::detect(),
        "workers": cli.workers.unwrap_or_else(|| HardwareInfo::detect().logical_cores),
        "defaults": {
            "render": RenderConfig::default(),
            "fit": FitConfig::default(),
            "drr": DrrConfig::default(),
            "gradcheck": GradcheckConfig::default(),
        },
        "scene": scene,
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("json"));
    Ok(())
}
