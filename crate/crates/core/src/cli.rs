//! Command-line surface: run configuration, flag overrides and the
//! subcommands that bind the pipeline into reproducible runs.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::classical::{fdk_reconstruct, seed_cloud, sirt_reconstruct, RampFilter, SeedConfig, SirtConfig};
use crate::error::{Error, Result};
use crate::gaussians::{GaussianCloud, ScaleBounds};
use crate::geometry::{uniform_angles, BeamKind, BeamModel, DetectorGrid, TiltGeometry};
use crate::io;
use crate::losses::{LossWeights, TvMode};
use crate::metrics::{evaluate_run, tv_of_error, EvalReport, Reconstruction};
use crate::splatter::{render_all_with, RenderOptions};
use crate::synthdata::{build_phantom, fixture_a, simulate_tilt_series, split_views, NoiseModel, PhantomSpec, SplitPattern, ViewSplit};
use crate::trainer::{train_with, LearningRates, LossRecord, TrainConfig, TrainObserver};
use crate::volume::{GridSpec, ProjectionStack, Volume};
use crate::voxelizer::voxelize;

/// How the views divide into training and held-out sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Train on every `split_stride`-th view.
    TrainEvery,
    /// Hold out every `split_stride`-th view.
    HoldoutEvery,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train_every" | "train-every" => Ok(Self::TrainEvery),
            "holdout_every" | "holdout-every" => Ok(Self::HoldoutEvery),
            _ => Err(Error::Config(format!("unknown split mode {s:?} (expected train_every or holdout_every)"))),
        }
    }
}

/// Declares `RunConfig`, its defaults, and a matching set of optional flags
/// so that configuration keys and command-line flags cannot drift apart.
macro_rules! run_config {
    ($( $(#[doc = $doc:expr])* $name:ident : $ty:ty = $default:expr ),* $(,)?) => {
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        pub struct RunConfig {
            $( $(#[doc = $doc])* pub $name: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $name: $default, )* }
            }
        }

        #[derive(Debug, Clone, Default, Args)]
        pub struct Overrides {
            $( $(#[doc = $doc])* #[arg(long)] pub $name: Option<$ty>, )*
        }

        impl Overrides {
            pub fn apply(&self, cfg: &mut RunConfig) {
                $( if let Some(v) = &self.$name { cfg.$name = v.clone(); } )*
            }
        }
    };
}

run_config! {
    /// Input projection stack (MRC, one section per view).
    stack: PathBuf = PathBuf::new(),
    /// Tilt angles, one per line in degrees; overrides n_views/max_angle_deg.
    angles: PathBuf = PathBuf::new(),
    output_dir: PathBuf = PathBuf::from("out"),
    /// Input volume (MRC).
    volume: PathBuf = PathBuf::new(),
    /// Input Gaussian cloud checkpoint.
    cloud: PathBuf = PathBuf::new(),
    /// Phantom description (TOML); empty selects the built-in core-shell fixture.
    phantom: PathBuf = PathBuf::new(),
    /// Ground-truth volume for volume-domain metrics.
    gt_volume: PathBuf = PathBuf::new(),

    n_views: usize = 45,
    max_angle_deg: f64 = 70.0,
    detector_size: usize = 64,
    pixel_size: f64 = 1.0,
    beam: BeamKind = BeamKind::Parallel,
    source_distance: f64 = 1000.0,
    probe_sigma: f64 = 0.0,
    grid_size: usize = 64,
    voxel_size: f64 = 1.0,

    dose: f64 = 1e4,
    gaussian_sigma: f64 = 0.0,

    split_mode: SplitMode = SplitMode::TrainEvery,
    split_stride: usize = 3,

    /// Hann gives a smoother initial volume; use ramlak for baseline numbers.
    filter: RampFilter = RampFilter::Hann,
    sirt_iterations: usize = 100,
    sirt_relaxation: f64 = 1.0,
    sirt_nonneg: bool = true,

    n_points: usize = 20_000,
    threshold_percentile: f64 = 75.0,

    iterations: usize = 5000,
    lr_position: f64 = 2e-3,
    lr_log_scale: f64 = 5e-3,
    lr_rotation: f64 = 1e-3,
    lr_denza: f64 = 5e-2,
    beta1: f64 = 0.9,
    beta2: f64 = 0.999,
    epsilon: f64 = 1e-15,
    prune_interval: usize = 500,
    prune_denza_floor: f64 = 1e-3,
    densify_interval: usize = 500,
    densify_percentile: f64 = 90.0,
    /// 0 selects 60% of `iterations`.
    densify_until: usize = 0,
    max_growth: f64 = 4.0,
    tv_grid_size: usize = 64,
    tv_stride: usize = 1,
    tv_mode: TvMode = TvMode::Axial3,
    lambda_pixel: f64 = 1.0,
    lambda_freq: f64 = 0.1,
    lambda_ssim: f64 = 0.2,
    lambda_3dtv: f64 = 0.01,
    lambda_hf: f64 = 1.0,
    /// Smallest Gaussian scale, in detector pixels.
    scale_min: f64 = 0.3,
    /// Largest Gaussian scale in world units; 0 selects a quarter of the volume extent.
    scale_max: f64 = 0.0,
    use_gamma: bool = true,
    /// 0 renders every training view each step.
    views_per_step: usize = 0,
    /// 0 disables periodic checkpoints.
    checkpoint_interval: usize = 0,

    /// Also write 16-bit PNG previews of rendered views.
    png: bool = false,
    rng_seed: u64 = 0,
}

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

fn set(p: &Path) -> bool {
    !p.as_os_str().is_empty()
}

fn required<'a>(p: &'a Path, flag: &str) -> Result<&'a Path> {
    if set(p) {
        Ok(p)
    } else {
        Err(Error::Config(format!("missing required flag --{flag}")))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("max_angle_deg", self.max_angle_deg),
            ("pixel_size", self.pixel_size),
            ("voxel_size", self.voxel_size),
            ("source_distance", self.source_distance),
            ("scale_min", self.scale_min),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let counts = [
            ("n_views", self.n_views),
            ("detector_size", self.detector_size),
            ("grid_size", self.grid_size),
            ("split_stride", self.split_stride),
            ("tv_grid_size", self.tv_grid_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.scale_max != 0.0 && !(self.scale_max > self.scale_min * self.pixel_size) {
            return Err(Error::Config(format!("scale_max {} must exceed scale_min", self.scale_max)));
        }
        self.noise().validate()?;
        self.train_config().validate()
    }

    pub fn angles(&self) -> Result<Vec<f64>> {
        if set(&self.angles) {
            io::read_angles(&self.angles)
        } else {
            Ok(uniform_angles(self.n_views, self.max_angle_deg))
        }
    }

    pub fn geometry(&self) -> Result<TiltGeometry> {
        let det = DetectorGrid::new(self.detector_size, self.detector_size, self.pixel_size)?;
        let mut beam = match self.beam {
            BeamKind::Parallel => BeamModel::parallel(),
            BeamKind::Cone => BeamModel::cone(self.source_distance),
        };
        beam.probe_sigma = self.probe_sigma;
        TiltGeometry::new(self.angles()?, det, beam)
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec::centered_cube(self.grid_size, self.voxel_size)
    }

    pub fn noise(&self) -> NoiseModel {
        NoiseModel { dose: self.dose, gaussian_sigma: self.gaussian_sigma, rng_seed: self.rng_seed }
    }

    pub fn split(&self, n_views: usize) -> Result<ViewSplit> {
        let pattern = match self.split_mode {
            SplitMode::TrainEvery => SplitPattern::EveryKthTrained(self.split_stride),
            SplitMode::HoldoutEvery => SplitPattern::EveryKthHeldOut(self.split_stride),
        };
        split_views(n_views, &pattern)
    }

    pub fn sirt_config(&self) -> SirtConfig {
        SirtConfig { iterations: self.sirt_iterations, relaxation: self.sirt_relaxation, nonneg: self.sirt_nonneg }
    }

    pub fn seed_config(&self) -> SeedConfig {
        SeedConfig { n_points: self.n_points, threshold_percentile: self.threshold_percentile, rng_seed: self.rng_seed }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_pixel: self.lambda_pixel,
            lambda_freq: self.lambda_freq,
            lambda_ssim: self.lambda_ssim,
            lambda_3dtv: self.lambda_3dtv,
            lambda_hf: self.lambda_hf,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let extent = self.grid_size as f64 * self.voxel_size;
        let scale_max = if self.scale_max > 0.0 { self.scale_max } else { 0.25 * extent };
        TrainConfig {
            iterations: self.iterations,
            lr: LearningRates {
                position: self.lr_position,
                log_scale: self.lr_log_scale,
                rotation: self.lr_rotation,
                denza_raw: self.lr_denza,
            },
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            prune_interval: self.prune_interval,
            prune_denza_floor: self.prune_denza_floor,
            densify_interval: self.densify_interval,
            densify_percentile: self.densify_percentile,
            densify_until: (self.densify_until > 0).then_some(self.densify_until),
            max_growth: self.max_growth,
            tv_grid: Some(GridSpec::centered_cube(self.tv_grid_size, extent / self.tv_grid_size as f64)),
            tv_stride: self.tv_stride,
            tv_mode: self.tv_mode,
            weights: self.weights(),
            scale_bounds: Some(ScaleBounds::new(self.scale_min * self.pixel_size, scale_max)),
            use_gamma: self.use_gamma,
            views_per_step: (self.views_per_step > 0).then_some(self.views_per_step),
            checkpoint_interval: self.checkpoint_interval,
            rng_seed: self.rng_seed,
        }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    fn read_stack(&self) -> Result<(ProjectionStack, TiltGeometry)> {
        let path = required(&self.stack, "stack")?;
        let geom = self.geometry()?;
        let stack = io::read_stack(path, geom.angles_deg())?;
        stack.check_geometry(&geom)?;
        Ok((stack, geom))
    }

    fn read_volume(&self) -> Result<Volume> {
        io::read_volume(required(&self.volume, "volume")?)
    }

    fn read_cloud(&self) -> Result<GaussianCloud> {
        io::read_cloud(required(&self.cloud, "cloud")?)
    }

    fn read_gt(&self) -> Result<Option<Volume>> {
        set(&self.gt_volume).then(|| io::read_volume(&self.gt_volume)).transpose()
    }

    /// Check that every referenced input path exists.
    fn check_paths(&self) -> Result<()> {
        let inputs = [
            ("stack", &self.stack),
            ("angles", &self.angles),
            ("volume", &self.volume),
            ("cloud", &self.cloud),
            ("phantom", &self.phantom),
            ("gt_volume", &self.gt_volume),
        ];
        for (name, p) in inputs {
            if set(p) && !p.exists() {
                return Err(Error::Config(format!("{name} path {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML file whose keys are RunConfig field names; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Random seed (same as --rng-seed).
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Build a phantom volume.
    Phantom(CommonArgs),
    /// Simulate a noisy tilt series from a volume.
    Simulate(CommonArgs),
    /// Filtered backprojection of the training views.
    Fdk(CommonArgs),
    /// SIRT reconstruction of the training views.
    Sirt(CommonArgs),
    /// Seed a Gaussian cloud from a volume.
    Seed(CommonArgs),
    /// Fit a Gaussian cloud to the training views.
    Train(CommonArgs),
    /// Render a cloud through the configured geometry.
    Render(CommonArgs),
    /// Sample a cloud on the reconstruction grid.
    Voxelize(CommonArgs),
    /// Score a cloud or volume against a stack.
    Evaluate(CommonArgs),
    /// Train the full model and the γ-off and Fourier-off variants.
    Ablate(CommonArgs),
}

#[derive(Debug, Parser)]
#[command(name = "denza", version, about = "Gaussian-splatting tomography for sparse-view ADF-STEM tilt series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::Phantom(a)
            | Command::Simulate(a)
            | Command::Fdk(a)
            | Command::Sirt(a)
            | Command::Seed(a)
            | Command::Train(a)
            | Command::Render(a)
            | Command::Voxelize(a)
            | Command::Evaluate(a)
            | Command::Ablate(a) => a,
        }
    }
}

/// Resolve the configuration: defaults, then the file, then flags.
pub fn resolve(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    args.overrides.apply(&mut cfg);
    if let Some(s) = args.seed {
        cfg.rng_seed = s;
    }
    cfg.validate()?;
    cfg.check_paths()?;
    Ok(cfg)
}

/// Entry point: parse, run, and map the outcome to an exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

pub fn execute(cmd: &Command) -> Result<()> {
    let cfg = resolve(cmd.common())?;
    fs::create_dir_all(&cfg.output_dir)?;
    io::write_atomic(&cfg.out(RESOLVED_CONFIG), cfg.to_toml().as_bytes())?;
    match cmd {
        Command::Phantom(_) => phantom(&cfg),
        Command::Simulate(_) => simulate(&cfg),
        Command::Fdk(_) => classical(&cfg, false),
        Command::Sirt(_) => classical(&cfg, true),
        Command::Seed(_) => seed(&cfg),
        Command::Train(_) => train(&cfg),
        Command::Render(_) => render(&cfg),
        Command::Voxelize(_) => voxelize_cmd(&cfg),
        Command::Evaluate(_) => evaluate(&cfg),
        Command::Ablate(_) => ablate(&cfg),
    }
}

fn phantom(cfg: &RunConfig) -> Result<()> {
    let spec: PhantomSpec = if set(&cfg.phantom) {
        let text = fs::read_to_string(&cfg.phantom)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", cfg.phantom.display())))?
    } else {
        fixture_a()
    };
    let vol = build_phantom(&spec)?;
    io::write_volume(&cfg.out("phantom.mrc"), &vol)?;
    println!("phantom {}x{}x{} sum {:.6}", vol.grid.nx, vol.grid.ny, vol.grid.nz, vol.sum());
    Ok(())
}

fn simulate(cfg: &RunConfig) -> Result<()> {
    let vol = cfg.read_volume()?;
    let geom = cfg.geometry()?;
    let stack = simulate_tilt_series(&vol, &geom, &cfg.noise())?;
    io::write_stack(&cfg.out("stack.mrc"), &stack, cfg.pixel_size)?;
    io::write_angles(&cfg.out("angles.tlt"), geom.angles_deg())?;
    println!("simulated {} views of {}x{}", stack.len(), cfg.detector_size, cfg.detector_size);
    Ok(())
}

fn training_views(cfg: &RunConfig) -> Result<(ProjectionStack, TiltGeometry, ProjectionStack, TiltGeometry, ViewSplit)> {
    let (stack, geom) = cfg.read_stack()?;
    let split = cfg.split(stack.len())?;
    let train_stack = stack.subset(&split.train)?;
    let train_geom = geom.subset(&split.train)?;
    Ok((stack, geom, train_stack, train_geom, split))
}

fn classical(cfg: &RunConfig, sirt: bool) -> Result<()> {
    let (_, _, ts, tg, split) = training_views(cfg)?;
    let grid = cfg.grid();
    let (vol, name) = if sirt {
        (sirt_reconstruct(&ts, &tg, &grid, &cfg.sirt_config())?, "sirt.mrc")
    } else {
        (fdk_reconstruct(&ts, &tg, &grid, cfg.filter)?, "fdk.mrc")
    };
    io::write_volume(&cfg.out(name), &vol)?;
    println!("{name}: {} training views", split.train.len());
    Ok(())
}

fn seed(cfg: &RunConfig) -> Result<()> {
    let vol = cfg.read_volume()?;
    let cloud = seed_cloud(&vol, &cfg.seed_config())?;
    io::write_cloud(&cfg.out("seed.dzgc"), &cloud)?;
    println!("seeded {} Gaussians", cloud.len());
    Ok(())
}

/// Writes periodic checkpoints and the last good cloud on abort.
struct CheckpointWriter {
    dir: PathBuf,
}

impl TrainObserver for CheckpointWriter {
    fn on_record(&mut self, r: &LossRecord) {
        if r.iteration % 100 == 0 {
            info!("iter {} n={} total={:.6e}", r.iteration, r.n_gaussians, r.total);
        }
    }

    fn on_checkpoint(&mut self, iteration: usize, cloud: &GaussianCloud) -> Result<()> {
        io::write_cloud(&self.dir.join(format!("checkpoint_{iteration:06}.dzgc")), cloud)
    }

    fn on_abort(&mut self, iteration: usize, last_good: &GaussianCloud, reason: &str) {
        eprintln!("training aborted at iteration {iteration}: {reason}");
        let _ = io::write_cloud(&self.dir.join("last_good.dzgc"), last_good);
    }
}

/// Train on the training views of `cfg`, writing the cloud, loss log and
/// voxelised volume under `dir`.
fn train_into(cfg: &RunConfig, tcfg: &TrainConfig, init: &GaussianCloud, dir: &Path) -> Result<GaussianCloud> {
    let (_, _, ts, tg, _) = training_views(cfg)?;
    fs::create_dir_all(dir)?;
    let (cloud, log) = train_with(&ts, &tg, init, tcfg, &mut CheckpointWriter { dir: dir.to_path_buf() })?;
    io::write_cloud(&dir.join("cloud.dzgc"), &cloud)?;
    let mut csv = Vec::new();
    log.write_csv(&mut csv)?;
    io::write_atomic(&dir.join("loss.csv"), &csv)?;
    io::write_volume(&dir.join("volume.mrc"), &voxelize(&cloud, &cfg.grid()))?;
    Ok(cloud)
}

fn train(cfg: &RunConfig) -> Result<()> {
    let init = cfg.read_cloud()?;
    let cloud = train_into(cfg, &cfg.train_config(), &init, &cfg.output_dir)?;
    println!("trained {} Gaussians for {} iterations", cloud.len(), cfg.iterations);
    Ok(())
}

fn render(cfg: &RunConfig) -> Result<()> {
    let cloud = cfg.read_cloud()?;
    let geom = cfg.geometry()?;
    let stack = render_all_with(&cloud, &geom, RenderOptions { use_gamma: cfg.use_gamma });
    io::write_stack(&cfg.out("render.mrc"), &stack, cfg.pixel_size)?;
    io::write_angles(&cfg.out("render.tlt"), geom.angles_deg())?;
    if cfg.png {
        for img in &stack.images {
            io::export_png(img, &cfg.out(&format!("render_{:03}.png", img.view)), io::Normalization::MinMax)?;
        }
    }
    println!("rendered {} views", stack.len());
    Ok(())
}

fn voxelize_cmd(cfg: &RunConfig) -> Result<()> {
    let cloud = cfg.read_cloud()?;
    io::write_volume(&cfg.out("voxelized.mrc"), &voxelize(&cloud, &cfg.grid()))?;
    Ok(())
}

fn write_report(cfg: &RunConfig, name: &str, report: &EvalReport) -> Result<()> {
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    io::write_atomic(&cfg.out(name), &csv)?;
    Ok(())
}

fn evaluate(cfg: &RunConfig) -> Result<()> {
    let (stack, geom) = cfg.read_stack()?;
    let split = cfg.split(stack.len())?;
    let gt = cfg.read_gt()?;
    let report = match (set(&cfg.cloud), set(&cfg.volume)) {
        (true, false) => {
            let cloud = cfg.read_cloud()?;
            evaluate_run(Reconstruction::Cloud(&cloud, RenderOptions { use_gamma: cfg.use_gamma }), &stack, &geom, &split, gt.as_ref())?
        }
        (false, true) => {
            let vol = cfg.read_volume()?;
            evaluate_run(Reconstruction::Volume(&vol), &stack, &geom, &split, gt.as_ref())?
        }
        _ => return Err(Error::Config("evaluate needs exactly one of --cloud or --volume".into())),
    };
    write_report(cfg, "metrics.csv", &report)?;
    print!("{}", report.table());
    Ok(())
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub test_psnr: f64,
    pub test_ssim: f64,
    pub train_psnr: f64,
    /// Total variation of the voxelised error, when a ground truth is given.
    pub tv_error: Option<f64>,
}

pub const ABLATION_HEADER: &str = "variant,test_psnr,test_ssim,train_psnr,tv_error";

pub fn write_ablation_csv<W: std::io::Write>(rows: &[AblationRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{ABLATION_HEADER}")?;
    for r in rows {
        let tv = r.tv_error.map(|t| format!("{t:.9e}")).unwrap_or_default();
        writeln!(w, "{},{:.6},{:.6},{:.6},{tv}", r.variant, r.test_psnr, r.test_ssim, r.train_psnr)?;
    }
    Ok(())
}

pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblationRow>> {
    let text = fs::read_to_string(path)?;
    let num = |s: &str| s.parse::<f64>().map_err(|e| Error::format("ablation", format!("{s:?}: {e}")));
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(Error::format("ablation", format!("expected 5 columns in {l:?}")));
            }
            Ok(AblationRow {
                variant: f[0].to_string(),
                test_psnr: num(f[1])?,
                test_ssim: num(f[2])?,
                train_psnr: num(f[3])?,
                tv_error: if f[4].is_empty() { None } else { Some(num(f[4])?) },
            })
        })
        .collect()
}

fn ablate(cfg: &RunConfig) -> Result<()> {
    let init = cfg.read_cloud()?;
    let (stack, geom) = cfg.read_stack()?;
    let split = cfg.split(stack.len())?;
    let gt = cfg.read_gt()?;
    let base = cfg.train_config();
    let variants = [
        ("full", base.clone()),
        ("no_gamma", TrainConfig { use_gamma: false, ..base.clone() }),
        ("no_freq", TrainConfig { weights: LossWeights { lambda_freq: 0.0, ..base.weights }, ..base.clone() }),
    ];
    let mut rows = Vec::new();
    for (name, tcfg) in variants {
        info!("ablation variant {name}");
        let dir = cfg.out(name);
        let cloud = train_into(cfg, &tcfg, &init, &dir)?;
        let rec = Reconstruction::Cloud(&cloud, RenderOptions { use_gamma: tcfg.use_gamma });
        let report = evaluate_run(rec, &stack, &geom, &split, gt.as_ref())?;
        let mut csv = Vec::new();
        report.write_csv(&mut csv)?;
        io::write_atomic(&dir.join("metrics.csv"), &csv)?;
        let tv_error = gt.as_ref().map(|g| tv_of_error(&voxelize(&cloud, &g.grid), g)).transpose()?;
        let test = report.row("test").expect("test row");
        let train = report.row("train").expect("train row");
        rows.push(AblationRow {
            variant: name.into(),
            test_psnr: test.psnr_mean,
            test_ssim: test.ssim_mean,
            train_psnr: train.psnr_mean,
            tv_error,
        });
    }
    let mut csv = Vec::new();
    write_ablation_csv(&rows, &mut csv)?;
    io::write_atomic(&cfg.out("ablation.csv"), &csv)?;
    for r in &rows {
        println!("{:<9} test PSNR {:>8.3} dB  SSIM {:.4}", r.variant, r.test_psnr, r.test_ssim);
    }
    Ok(())
}
