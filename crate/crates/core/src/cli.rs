//! Command-line front end. Every subcommand validates its arguments, runs
//! one pipeline stage and writes a run manifest next to its outputs.
//!
//! Exit codes: 0 success, 1 domain failure, 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::ablation::{ablation_grid, parse_grid};
use crate::calibration::{self, percentile_sweep, WrCalibration};
use crate::dataset::Dataset;
use crate::error::Error;
use crate::extract::{color_by_triplet, extract_pointcloud, refine_pointcloud, ExtractConfig, ExtractMode, ProbePolicy};
use crate::geometry::Vec3;
use crate::hypercube::{self, read_cube, write_cube, BandTriplet, HyperCube, Mask};
use crate::losses::LossReport;
use crate::metrics::{evaluate_heldout, write_heldout, MaskPolicy};
use crate::plot::{Plot, BLUE};
use crate::render::{render_view, RenderConfig};
use crate::scene::{emit_dataset, AnalyticScene, SynthOptions, TurntableConfig};
use crate::spatial::{parse_eps_grid, pr_sweep, read_ply, write_ply, IcpConfig};
use crate::train::{load_checkpoint, save_checkpoint, train_stage, Stage, TrainConfig, TrainState};

/// Environment variable naming the default dataset directory.
pub const DATA_ENV: &str = "HYPERFIELD_DATA";
pub const MANIFEST_NAME: &str = "run_manifest.json";

#[derive(Parser, Debug)]
#[command(name = "hyperfield", version, about = "Hyperspectral radiance-field toolkit")]
pub struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// TOML file with `[train]`, `[render]` and `[extract]` tables; flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic turntable dataset of the desk fruit scene.
    Synth(SynthArgs),
    /// Calibrate a raw cube against a white reference.
    Calibrate(CalibrateArgs),
    /// Refined white-reference mask statistics over several percentiles.
    SweepWr(SweepWrArgs),
    /// Two-stage training on a dataset.
    Train(TrainArgs),
    /// Loss-weight ablation over (lambda_ang, lambda_hsi) pairs.
    Ablate(AblateArgs),
    /// Render a view from a checkpoint.
    Render(RenderArgs),
    /// Held-out spectral metrics of a checkpoint.
    EvalSpectral(EvalSpectralArgs),
    /// Precision/recall sweep between two point clouds.
    EvalSpatial(EvalSpatialArgs),
    /// Extract a spectral point cloud from a checkpoint.
    Extract(ExtractArgs),
    /// False-color composite of a cube or a spectral point cloud.
    Composite(CompositeArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    pub views: usize,
    #[arg(long, default_value_t = 8)]
    pub bands: usize,
    /// Image width and height in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Additive Gaussian noise standard deviation.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.1)]
    pub eval_fraction: f64,
    /// Also write a vignetted white reference and a raw capture of view 0.
    #[arg(long)]
    pub reference: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    /// White-reference cube (.bil or .hdr).
    #[arg(long)]
    pub wr: PathBuf,
    /// Coarse reference ROI mask (PNG).
    #[arg(long)]
    pub roi: PathBuf,
    #[arg(long, default_value_t = calibration::DEFAULT_PERCENTILE)]
    pub percentile: f64,
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepWrArgs {
    #[arg(long)]
    pub wr: PathBuf,
    #[arg(long)]
    pub roi: PathBuf,
    /// Comma-separated percentiles.
    #[arg(long, default_value = "65,70,75")]
    pub percentiles: String,
    #[arg(long)]
    pub out: PathBuf,
}

/// Training knobs shared by `train` and `ablate`; unset flags fall back to
/// the config file, then to built-in defaults.
#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub pretrain_iters: Option<usize>,
    #[arg(long)]
    pub finetune_iters: Option<usize>,
    #[arg(long)]
    pub rays: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub coarse: Option<usize>,
    #[arg(long)]
    pub fine: Option<usize>,
    #[arg(long)]
    pub normal_rays: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Let fine-tuning update the density and normal heads as well.
    #[arg(long)]
    pub finetune_geometry: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    #[arg(long)]
    pub lambda_ang: Option<f64>,
    #[arg(long)]
    pub lambda_hsi: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    /// `default` or `ang:hsi,ang:hsi,...`.
    #[arg(long, default_value = "default")]
    pub grid: String,
    #[arg(long, default_value = "full-frame")]
    pub mask_policy: MaskPolicy,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset supplying the camera and poses.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// View index within the dataset.
    #[arg(long, default_value_t = 0)]
    pub view: usize,
    #[arg(long)]
    pub coarse: Option<usize>,
    #[arg(long)]
    pub fine: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalSpectralArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "full-frame")]
    pub mask_policy: MaskPolicy,
    /// Composite wavelengths for the comparison images.
    #[arg(long, default_value = "650,540,470")]
    pub triplet: BandTriplet,
    #[arg(long)]
    pub coarse: Option<usize>,
    #[arg(long)]
    pub fine: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalSpatialArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// `start:stop:step` or a comma-separated list, in meters.
    #[arg(long, default_value = "0.001:0.01:0.001")]
    pub eps_grid: String,
    /// Score without rigid registration.
    #[arg(long)]
    pub no_icp: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub sigma_min: Option<f64>,
    #[arg(long)]
    pub mode: Option<ExtractMode>,
    /// Probe along this single direction (`x,y,z`) instead of six axes.
    #[arg(long)]
    pub probe_dir: Option<String>,
    /// Statistical outlier removal neighbours; 0 disables.
    #[arg(long, default_value_t = 16)]
    pub refine_k: usize,
    #[arg(long, default_value_t = 2.0)]
    pub std_ratio: f64,
    /// Write colors from this band triplet instead of spectra.
    #[arg(long)]
    pub triplet: Option<BandTriplet>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CompositeArgs {
    /// A cube (.bil/.hdr) or a spectral point cloud (.ply).
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value = "801,708,551")]
    pub triplet: BandTriplet,
    /// PNG for cubes, PLY for point clouds.
    #[arg(long)]
    pub out: PathBuf,
}

/// Provenance record written beside every command's outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub duration_s: f64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct FileConfig {
    train: Option<TrainConfig>,
    render: Option<RenderConfig>,
    extract: Option<ExtractConfig>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Domain(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Domain(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Output of one command, recorded in its manifest.
struct Outcome {
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    /// Directory receiving the manifest.
    manifest_dir: PathBuf,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return 2;
        }
        // a global pool may already exist when called repeatedly in-process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let name = command_name(&cli.command);
    let t0 = Instant::now();
    let result = load_file_config(cli.config.as_deref()).and_then(|fc| dispatch(&cli.command, &fc));
    match result {
        Ok(outcome) => {
            let manifest = RunManifest {
                command: name.to_string(),
                config: outcome.config,
                seed: outcome.seed,
                inputs: outcome.inputs,
                outputs: outcome.outputs,
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                duration_s: t0.elapsed().as_secs_f64(),
            };
            let path = outcome.manifest_dir.join(MANIFEST_NAME);
            let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
            if let Err(e) = fs::create_dir_all(&outcome.manifest_dir).and_then(|_| fs::write(&path, json)) {
                eprintln!("error: writing {}: {e}", path.display());
                return 1;
            }
            0
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Domain(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth(_) => "synth",
        Command::Calibrate(_) => "calibrate",
        Command::SweepWr(_) => "sweep-wr",
        Command::Train(_) => "train",
        Command::Ablate(_) => "ablate",
        Command::Render(_) => "render",
        Command::EvalSpectral(_) => "eval-spectral",
        Command::EvalSpatial(_) => "eval-spatial",
        Command::Extract(_) => "extract",
        Command::Composite(_) => "composite",
    }
}

fn load_file_config(path: Option<&Path>) -> CliResult<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| usage(format!("reading {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

fn dispatch(cmd: &Command, fc: &FileConfig) -> CliResult<Outcome> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Calibrate(a) => calibrate(a),
        Command::SweepWr(a) => sweep_wr(a),
        Command::Train(a) => train(a, fc),
        Command::Ablate(a) => ablate(a, fc),
        Command::Render(a) => render(a, fc),
        Command::EvalSpectral(a) => eval_spectral(a, fc),
        Command::EvalSpatial(a) => eval_spatial(a),
        Command::Extract(a) => extract(a, fc),
        Command::Composite(a) => composite(a),
    }
}

fn dataset_dir(arg: &Option<PathBuf>) -> CliResult<PathBuf> {
    match arg {
        Some(p) => Ok(p.clone()),
        None => std::env::var_os(DATA_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| usage(format!("--dataset not given and {DATA_ENV} is unset"))),
    }
}

fn require_file(p: &Path) -> CliResult<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(usage(format!("input {} does not exist", p.display())))
    }
}

fn parent_dir(p: &Path) -> PathBuf {
    p.parent()
        .filter(|d| !d.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

/// Smooth illuminant used for synthetic raw captures.
fn synthetic_illuminant(wavelengths: &[f64]) -> Vec<f64> {
    wavelengths
        .iter()
        .map(|nm| 0.35 + 0.6 * (-((nm - 720.0) / 260.0).powi(2)).exp())
        .collect()
}

fn synth(a: &SynthArgs) -> CliResult<Outcome> {
    if a.views < 2 || a.bands == 0 || a.size < 4 {
        return Err(usage("need --views >= 2, --bands >= 1 and --size >= 4"));
    }
    if !(a.noise >= 0.0) || !(a.eval_fraction > 0.0 && a.eval_fraction < 1.0) {
        return Err(usage("--noise must be >= 0 and --eval-fraction in (0, 1)"));
    }
    let scene = AnalyticScene::desk_fruit();
    let mut ring = TurntableConfig::desk_default();
    ring.n_views = a.views;
    ring.intrinsics =
        crate::geometry::CameraModel::from_fov(0.443, a.size, a.size).map_err(|e| usage(e.to_string()))?;
    let opts = SynthOptions {
        wavelengths: hypercube::linear_wavelengths(400.0, 1000.0, a.bands),
        noise_std: a.noise,
        seed: a.seed,
        eval_fraction: a.eval_fraction,
    };
    let data = emit_dataset(&scene, &ring, &opts, &a.out)?;
    let mut outputs = vec![a.out.clone()];
    if a.reference {
        let dir = a.out.join("reference");
        let wl = data.wavelengths();
        let illum = synthetic_illuminant(wl);
        let wr = calibration::vignetted_reference(a.size, a.size, wl, &illum, 0.45, 0.8)?;
        write_cube(&wr, &dir.join("white.bil"))?;
        let c = (a.size as f64 - 1.0) / 2.0;
        let roi = Mask::from_fn(a.size, a.size, |y, x| {
            ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt() <= 0.45 * a.size as f64
        });
        roi.write_png(&dir.join("roi.png"))?;
        let view = &data.cubes[0];
        let raw = HyperCube::from_fn(a.size, a.size, wl.to_vec(), hypercube::CubeKind::Raw, |y, x, b| {
            (view.get(y, x, b) as f64 * illum[b]) as f32
        })?;
        write_cube(&raw, &dir.join("raw_view_000.bil"))?;
        outputs.push(dir);
    }
    Ok(Outcome {
        config: json!({ "views": a.views, "bands": a.bands, "size": a.size, "noise": a.noise,
                        "eval_fraction": a.eval_fraction, "reference": a.reference,
                        "turntable": to_value(&ring), "wavelengths": opts.wavelengths }),
        seed: Some(a.seed),
        inputs: vec![],
        outputs,
        manifest_dir: a.out.clone(),
    })
}

fn check_percentile(p: f64) -> CliResult<()> {
    if p > 0.0 && p < 100.0 {
        Ok(())
    } else {
        Err(usage(format!("percentile {p} outside (0, 100)")))
    }
}

fn calibrate(a: &CalibrateArgs) -> CliResult<Outcome> {
    check_percentile(a.percentile)?;
    if a.window == 0 || a.window % 2 == 0 {
        return Err(usage("--window must be odd"));
    }
    for p in [&a.wr, &a.roi, &a.input] {
        require_file(p)?;
    }
    let wr = read_cube(&a.wr)?;
    let roi = Mask::read_png(&a.roi)?;
    let cube = read_cube(&a.input)?;
    let calib = WrCalibration::fit(&wr, &roi, a.percentile, a.window)?;
    let out = calibration::calibrate(&cube, &calib)?;
    write_cube(&out, &a.out)?;
    let dir = parent_dir(&a.out);
    let stem = a.out.file_stem().and_then(|s| s.to_str()).unwrap_or("calibrated");
    let mask_path = dir.join(format!("{stem}_wr_mask.png"));
    calib.mask.as_ref().expect("fitted mask").write_png(&mask_path)?;
    let spec_path = dir.join(format!("{stem}_wr_spectrum.csv"));
    hypercube::write_spectrum_csv(wr.wavelengths(), &calib.smoothed_spectrum, &spec_path)?;
    Ok(Outcome {
        config: json!({ "percentile": a.percentile, "window": a.window, "pixel_count": calib.pixel_count }),
        seed: None,
        inputs: vec![a.wr.clone(), a.roi.clone(), a.input.clone()],
        outputs: vec![a.out.clone(), hypercube::header_path_for(&a.out), mask_path, spec_path],
        manifest_dir: dir,
    })
}

fn sweep_wr(a: &SweepWrArgs) -> CliResult<Outcome> {
    let ps: Vec<f64> = a
        .percentiles
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| usage(format!("bad percentile `{s}`"))))
        .collect::<CliResult<_>>()?;
    for &p in &ps {
        check_percentile(p)?;
    }
    require_file(&a.wr)?;
    require_file(&a.roi)?;
    let wr = read_cube(&a.wr)?;
    let roi = Mask::read_png(&a.roi)?;
    let report = percentile_sweep(&wr, &roi, &ps)?;
    report.write(&a.out)?;
    let counts: Vec<f64> = report.rows.iter().map(|r| r.pixel_count as f64).collect();
    let plot_path = a.out.join("sweep.png");
    Plot::new(480, 320).line(&ps, &counts, BLUE).save(&plot_path)?;
    Ok(Outcome {
        config: json!({ "percentiles": ps }),
        seed: None,
        inputs: vec![a.wr.clone(), a.roi.clone()],
        outputs: vec![a.out.join("sweep.csv"), plot_path],
        manifest_dir: a.out.clone(),
    })
}

fn train_config(flags: &TrainFlags, fc: &FileConfig) -> CliResult<TrainConfig> {
    let mut cfg = fc.train.clone().unwrap_or_default();
    if let Some(r) = &fc.render {
        cfg.render = r.clone();
    }
    macro_rules! over {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    over!(flags.pretrain_iters, cfg.pretrain_iters);
    over!(flags.finetune_iters, cfg.finetune_iters);
    over!(flags.rays, cfg.rays_per_batch);
    over!(flags.lr, cfg.lr_init);
    over!(flags.normal_rays, cfg.normal_rays);
    over!(flags.seed, cfg.seed);
    over!(flags.coarse, cfg.render.coarse_samples);
    over!(flags.fine, cfg.render.fine_samples);
    if flags.finetune_geometry {
        cfg.freeze_geometry_in_finetune = false;
    }
    if let Some(w) = flags.width {
        cfg.field.trunk_width = w;
        cfg.field.radiance_width = w;
    }
    if cfg.lr_final > cfg.lr_init {
        cfg.lr_final = cfg.lr_init;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let mut probe = cfg.field.clone();
    probe.n_channels = probe.n_channels.max(1);
    probe.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    if !dir.join(crate::dataset::MANIFEST_FILE).is_file() {
        return Err(usage(format!("{} is not a dataset directory", dir.display())));
    }
    Ok(Dataset::load(dir)?)
}

fn write_losses(state: &TrainState, path: &Path) -> CliResult<()> {
    let mut s = format!("stage,{},lr\n", LossReport::CSV_HEADER);
    for e in &state.history {
        s.push_str(&format!("{},{},{}\n", e.stage, e.report.csv_row(e.step), e.lr));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn train(a: &TrainArgs, fc: &FileConfig) -> CliResult<Outcome> {
    let mut cfg = train_config(&a.flags, fc)?;
    if let Some(v) = a.lambda_ang {
        cfg.weights.ang = v;
    }
    if let Some(v) = a.lambda_hsi {
        cfg.weights.hsi = v;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let dir = dataset_dir(&a.flags.dataset)?;
    let data = load_dataset(&dir)?;
    let mut state = TrainState::init(&cfg, &data)?;
    for stage in [Stage::Pretrain, Stage::Finetune] {
        state = train_stage(state, &cfg, &data, stage)?;
    }
    save_checkpoint(&state, &a.out)?;
    let out_dir = parent_dir(&a.out);
    let stem = a.out.file_stem().and_then(|s| s.to_str()).unwrap_or("train");
    let losses = out_dir.join(format!("{stem}_losses.csv"));
    write_losses(&state, &losses)?;
    Ok(Outcome {
        config: to_value(&cfg),
        seed: Some(cfg.seed),
        inputs: vec![dir],
        outputs: vec![a.out.clone(), losses],
        manifest_dir: out_dir,
    })
}

fn ablate(a: &AblateArgs, fc: &FileConfig) -> CliResult<Outcome> {
    let cfg = train_config(&a.flags, fc)?;
    let grid = parse_grid(&a.grid).map_err(|e| usage(e.to_string()))?;
    let dir = dataset_dir(&a.flags.dataset)?;
    let data = load_dataset(&dir)?;
    let report = ablation_grid(&cfg, &data, &grid, a.mask_policy)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let csv = a.out.join("ablation.csv");
    fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let js = a.out.join("ablation.json");
    fs::write(&js, serde_json::to_string_pretty(&report).expect("report serializes"))
        .map_err(|e| Error::io(&js, e))?;
    Ok(Outcome {
        config: json!({ "train": to_value(&cfg), "grid": grid, "mask_policy": to_value(&a.mask_policy) }),
        seed: Some(cfg.seed),
        inputs: vec![dir],
        outputs: vec![csv, js],
        manifest_dir: a.out.clone(),
    })
}

fn render_config(fc: &FileConfig, coarse: Option<usize>, fine: Option<usize>) -> CliResult<RenderConfig> {
    let mut cfg = fc
        .render
        .clone()
        .or_else(|| fc.train.as_ref().map(|t| t.render.clone()))
        .unwrap_or_default();
    cfg.jitter = false;
    if let Some(c) = coarse {
        cfg.coarse_samples = c;
    }
    if let Some(f) = fine {
        cfg.fine_samples = f;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn render(a: &RenderArgs, fc: &FileConfig) -> CliResult<Outcome> {
    let cfg = render_config(fc, a.coarse, a.fine)?;
    require_file(&a.ckpt)?;
    let dir = dataset_dir(&a.dataset)?;
    let data = load_dataset(&dir)?;
    if a.view >= data.n_views() {
        return Err(usage(format!("view {} out of range (dataset has {})", a.view, data.n_views())));
    }
    let state = load_checkpoint(&a.ckpt)?;
    let out = render_view(
        &state.field,
        &state.frame,
        &state.bounds,
        &data.camera,
        &data.poses[a.view],
        &state.wavelengths,
        &cfg,
        0,
    )?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let cube = a.out.join(crate::dataset::view_name(a.view, "bil"));
    write_cube(&out.cube, &cube)?;
    let finite: Vec<f64> = out.depth.iter().copied().filter(|d| d.is_finite()).collect();
    let (lo, hi) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), d| (l.min(*d), h.max(*d)));
    let depth_img = out.depth.mapv(|d| if d.is_finite() { d as f32 } else { hi as f32 });
    let depth = a.out.join("depth.png");
    let (lo, hi) = if finite.is_empty() { (0.0, 1.0) } else { (lo, hi.max(lo + 1e-9)) };
    hypercube::write_gray_png(&depth_img, lo as f32, hi as f32, &depth)?;
    let acc = a.out.join("accumulation.png");
    hypercube::write_gray_png(&out.accumulation.mapv(|v| v as f32), 0.0, 1.0, &acc)?;
    Ok(Outcome {
        config: json!({ "render": to_value(&cfg), "view": a.view }),
        seed: None,
        inputs: vec![a.ckpt.clone(), dir],
        outputs: vec![cube, depth, acc],
        manifest_dir: a.out.clone(),
    })
}

fn eval_spectral(a: &EvalSpectralArgs, fc: &FileConfig) -> CliResult<Outcome> {
    let cfg = render_config(fc, a.coarse, a.fine)?;
    require_file(&a.ckpt)?;
    let dir = dataset_dir(&a.dataset)?;
    let data = load_dataset(&dir)?;
    a.triplet.validate(data.wavelengths()).map_err(|e| usage(e.to_string()))?;
    let state = load_checkpoint(&a.ckpt)?;
    let name = dir.file_name().and_then(|s| s.to_str()).unwrap_or("dataset").to_string();
    let report = evaluate_heldout(&state, &data, a.mask_policy, &cfg, &name)?;
    write_heldout(&report, &data, &a.triplet, &a.out)?;
    println!(
        "SAM {:.4} ± {:.4} rad, RMSE {:.4}, SSIM {:.4}, PSNR {:.2} dB over {} views",
        report.summary.sam_rad.mean,
        report.summary.sam_rad.sd,
        report.summary.rmse.mean,
        report.summary.ssim.mean,
        report.summary.psnr_db.mean,
        report.summary.n_views
    );
    Ok(Outcome {
        config: json!({ "render": to_value(&cfg), "mask_policy": to_value(&a.mask_policy),
                        "triplet": to_value(&a.triplet), "summary": to_value(&report.summary) }),
        seed: None,
        inputs: vec![a.ckpt.clone(), dir],
        outputs: vec![a.out.join("metrics.csv")],
        manifest_dir: a.out.clone(),
    })
}

fn eval_spatial(a: &EvalSpatialArgs) -> CliResult<Outcome> {
    let grid = parse_eps_grid(&a.eps_grid).map_err(|e| usage(e.to_string()))?;
    require_file(&a.pred)?;
    require_file(&a.gt)?;
    let (pred, _) = read_ply(&a.pred)?;
    let (gt, _) = read_ply(&a.gt)?;
    let icp = IcpConfig::default();
    let curve = pr_sweep(&pred, &gt, &grid, (!a.no_icp).then_some(&icp))?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let csv = a.out.join("pr_curve.csv");
    fs::write(&csv, curve.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let png = a.out.join("pr_curve.png");
    curve.plot().save(&png)?;
    println!(
        "best F {:.2} at eps {} m{}",
        100.0 * curve.best_fscore,
        curve.best_eps,
        curve.icp_rms.map(|r| format!(" (ICP RMS {r:.6} m)")).unwrap_or_default()
    );
    Ok(Outcome {
        config: json!({ "eps_grid": grid, "icp": (!a.no_icp).then_some(to_value(&icp)),
                        "best_eps": curve.best_eps, "best_fscore": 100.0 * curve.best_fscore,
                        "icp_rms": curve.icp_rms }),
        seed: None,
        inputs: vec![a.pred.clone(), a.gt.clone()],
        outputs: vec![csv, png],
        manifest_dir: a.out.clone(),
    })
}

fn parse_vec3(s: &str) -> CliResult<Vec3> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| usage(format!("bad vector `{s}`"))))
        .collect::<CliResult<_>>()?;
    match v.as_slice() {
        [x, y, z] => Ok(Vec3::new(*x, *y, *z)),
        _ => Err(usage(format!("expected x,y,z, got `{s}`"))),
    }
}

fn extract(a: &ExtractArgs, fc: &FileConfig) -> CliResult<Outcome> {
    let mut cfg = fc.extract.clone().unwrap_or_default();
    if let Some(r) = a.resolution {
        cfg.resolution = r;
    }
    if let Some(s) = a.sigma_min {
        cfg.sigma_min = s;
    }
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(d) = &a.probe_dir {
        cfg.probe = ProbePolicy::Single(parse_vec3(d)?);
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    if !(a.std_ratio >= 0.0) {
        return Err(usage("--std-ratio must be >= 0"));
    }
    require_file(&a.ckpt)?;
    let state = load_checkpoint(&a.ckpt)?;
    if let Some(t) = &a.triplet {
        t.validate(&state.wavelengths).map_err(|e| usage(e.to_string()))?;
    }
    let raw = extract_pointcloud(&state, &cfg)?;
    let raw_len = raw.len();
    let pc = if a.refine_k > 0 {
        refine_pointcloud(&raw, a.refine_k, a.std_ratio)?
    } else {
        raw
    };
    let colors = match &a.triplet {
        Some(t) => Some(color_by_triplet(&pc, t, &state.wavelengths)?),
        None => None,
    };
    write_ply(&pc, colors.as_ref(), &a.out)?;
    println!("{} points ({} before outlier removal)", pc.len(), raw_len);
    Ok(Outcome {
        config: json!({ "extract": to_value(&cfg), "refine_k": a.refine_k, "std_ratio": a.std_ratio,
                        "triplet": a.triplet.map(|t| to_value(&t)), "points": pc.len() }),
        seed: None,
        inputs: vec![a.ckpt.clone()],
        outputs: vec![a.out.clone()],
        manifest_dir: parent_dir(&a.out),
    })
}

fn composite(a: &CompositeArgs) -> CliResult<Outcome> {
    require_file(&a.input)?;
    let is_ply = a.input.extension().is_some_and(|e| e == "ply");
    if is_ply {
        let (pc, _) = read_ply(&a.input)?;
        let wl = pc
            .wavelengths
            .clone()
            .ok_or_else(|| usage(format!("{} carries no wavelengths", a.input.display())))?;
        let colors = color_by_triplet(&pc, &a.triplet, &wl)?;
        write_ply(&pc, Some(&colors), &a.out)?;
    } else {
        let cube = read_cube(&a.input)?;
        let rgb = cube.composite(&a.triplet)?;
        hypercube::write_rgb_png(&rgb, &a.out)?;
    }
    Ok(Outcome {
        config: json!({ "triplet": to_value(&a.triplet), "kind": if is_ply { "pointcloud" } else { "cube" } }),
        seed: None,
        inputs: vec![a.input.clone()],
        outputs: vec![a.out.clone()],
        manifest_dir: parent_dir(&a.out),
    })
}
