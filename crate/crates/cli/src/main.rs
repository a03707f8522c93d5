//! `splat360` command-line tool.

mod commands;
mod error;
mod stage;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use splat360::fit::Ablation;

#[derive(Debug, Parser)]
#[command(name = "splat360", version, about = "Render, fit and inspect anisotropic Gaussian splat scenes and CT radiographs")]
pub struct Cli {
    /// Seed for every random choice a command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; defaults to one per logical core.
    #[arg(long, global = true, env = "SPLAT360_WORKERS")]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render color frames (and optionally depth/transmittance) of a scene.
    Render(RenderArgs),
    /// Project a CT volume into a digitally reconstructed radiograph.
    Drr(DrrArgs),
    /// Fit a scene's appearance to posed target images.
    Fit(FitArgs),
    /// Select depth-discontinuity anchors for one or more views.
    Anchors(AnchorArgs),
    /// PSNR and SSIM between two images.
    Metrics(MetricsArgs),
    /// Compare analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Measure render throughput.
    Bench(BenchArgs),
    /// Print version, hardware, defaults and optionally a scene summary.
    Info(InfoArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ViewArgs {
    /// Camera JSON file; repeat for several views. Overrides --orbit.
    #[arg(long = "camera")]
    pub cameras: Vec<PathBuf>,
    /// `ring:N` or `fibonacci:N` around the scene center.
    #[arg(long, default_value = "ring:8")]
    pub orbit: String,
    /// Orbit radius; defaults to three times the scene radius.
    #[arg(long)]
    pub radius: Option<f64>,
    /// Ring elevation in radians.
    #[arg(long, default_value_t = 0.3)]
    pub elevation: f64,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 128)]
    pub height: usize,
    /// Vertical field of view in radians.
    #[arg(long, default_value_t = 0.9)]
    pub fov: f64,
}

#[derive(Debug, Clone, Args)]
pub struct RenderFlags {
    /// Early-termination transmittance threshold.
    #[arg(long, default_value_t = 1e-3)]
    pub epsilon: f64,
    /// Mahalanobis cutoff in standard deviations.
    #[arg(long, default_value_t = 3.0)]
    pub cutoff: f64,
    /// Fold the anisotropic radiance in without the phase function.
    #[arg(long)]
    pub no_disentangle: bool,
    /// Drop the anisotropic radiance entirely.
    #[arg(long)]
    pub no_anisotropy: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[command(flatten)]
    pub view: ViewArgs,
    #[command(flatten)]
    pub flags: RenderFlags,
    /// Also write expected-depth PFMs.
    #[arg(long)]
    pub depth: bool,
    /// Also write final-transmittance PFMs.
    #[arg(long)]
    pub transmittance: bool,
    /// Fuse colors through this MLP parameter file.
    #[arg(long)]
    pub mlp: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DrrOutputArg {
    Intensity,
    LineIntegral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ImageFormat {
    Ppm,
    Pfm,
}

#[derive(Debug, Args)]
pub struct DrrArgs {
    /// Volume header file.
    #[arg(long)]
    pub volume: PathBuf,
    /// Source to volume-center distance in mm.
    #[arg(long, default_value_t = 500.0)]
    pub source_distance: f64,
    /// Volume-center to detector distance in mm.
    #[arg(long, default_value_t = 100.0)]
    pub detector_distance: f64,
    #[arg(long, default_value_t = 64)]
    pub det_width: usize,
    #[arg(long, default_value_t = 64)]
    pub det_height: usize,
    #[arg(long, default_value_t = 1.0)]
    pub pixel_mm: f64,
    /// Water attenuation in 1/mm.
    #[arg(long, default_value_t = 0.02)]
    pub mu_water: f64,
    #[arg(long, default_value_t = 1.0)]
    pub i0: f64,
    /// Ray-march step in mm; defaults to a quarter of the finest spacing.
    #[arg(long)]
    pub step_mm: Option<f64>,
    #[arg(long, value_enum, default_value_t = DrrOutputArg::Intensity)]
    pub output: DrrOutputArg,
    /// Image format; PPM for intensity and PFM for line integrals by default.
    #[arg(long, value_enum)]
    pub format: Option<ImageFormat>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Initial scene.
    #[arg(long)]
    pub scene: PathBuf,
    /// Directory of `camera_NNN.json` + `frame_NNN.pfm` (or `.ppm`) pairs.
    #[arg(long)]
    pub targets: PathBuf,
    /// Fit configuration JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda_mse: Option<f64>,
    #[arg(long)]
    pub lambda_ssim: Option<f64>,
    #[arg(long)]
    pub lambda_lpips: Option<f64>,
    /// Disable one mechanism; repeatable.
    #[arg(long, value_parser = parse_ablation)]
    pub ablation: Vec<Ablation>,
    #[arg(long)]
    pub optimize_geometry: bool,
    #[arg(long)]
    pub ray_budget: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub anchor_fraction: Option<f64>,
    #[arg(long)]
    pub anchor_beta: Option<f64>,
    #[arg(long)]
    pub trace_every: Option<usize>,
    /// Start the fusion MLP from this parameter file.
    #[arg(long, conflicts_with = "mlp_init")]
    pub mlp: Option<PathBuf>,
    /// Start the fusion MLP from a seeded initialization.
    #[arg(long)]
    pub mlp_init: bool,
    #[command(flatten)]
    pub flags: RenderFlags,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: splat360::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct AnchorArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[command(flatten)]
    pub view: ViewArgs,
    #[command(flatten)]
    pub flags: RenderFlags,
    /// Maximum anchors per view.
    #[arg(long, default_value_t = 64)]
    pub k: usize,
    /// Softmin temperature.
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub beta: f64,
    /// Non-maximum suppression radius in pixels.
    #[arg(long, default_value_t = 5.0)]
    pub suppression: f64,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    pub a: PathBuf,
    pub b: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Relative tolerance for the MLP and loss checks.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Relative tolerance for the full-render check.
    #[arg(long, default_value_t = 1e-3)]
    pub render_tol: f64,
    #[arg(long, default_value_t = 100)]
    pub draws: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Scene to render; defaults to a seeded random scene.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Size of the generated scene.
    #[arg(long, default_value_t = 5000)]
    pub gaussians: usize,
    /// Square frame size in pixels.
    #[arg(long, default_value_t = 512)]
    pub res: usize,
    #[arg(long, default_value_t = 10)]
    pub frames: usize,
    /// Also time this many workers and report the speedup.
    #[arg(long)]
    pub baseline_workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InfoArgs {
    #[arg(long)]
    pub scene: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
