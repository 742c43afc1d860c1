//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs without the libtest harness so the fixture pipeline is
//! built once and shared by the criteria that need it.
//!
//! `ACCEPTANCE_ONLY=5,6` restricts the run to the listed criteria.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::{adaptive_simpson, gradcheck, random_quat, random_spd, rng};
use denza::classical::{backproject, project_all};
use denza::cli::{read_ablation_csv, RunConfig};
use denza::gaussians::{covariance_from_scale_rotation, gamma};
use denza::io::{self, cloud_from_bytes, cloud_to_bytes, MrcData};
use denza::losses::{fourier_amplitude, total_loss, tv3d, LossOptions, LossWeights, TvMode};
use denza::metrics::{psnr, ssim};
use denza::splatter::render_all;
use denza::{BeamModel, DetectorGrid, GaussianCloud, GridSpec, ProjectionImage, ProjectionStack, TiltGeometry, Volume};
use nalgebra::Vector3;
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let mut failures = Vec::new();
    for (name, r) in gradcheck::all() {
        if let Err(e) = r {
            failures.push(format!("{name}: {e}"));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(failures.is_empty(), failures.join("; "))?;
    ensure(secs < 60.0, format!("suite took {secs:.1} s"))?;
    Ok(format!("7 cases within {:e} rel / {:e} abs in {secs:.2} s", gradcheck::REL, gradcheck::ABS))
}

fn gamma_exactness() -> Outcome {
    let mut r = rng(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let s = random_spd(&mut r);
        let cov2d = s.fixed_view::<2, 2>(0, 0).into_owned();
        let g = gamma(&s, &cov2d).map_err(|e| e.to_string())?;
        let inv = s.try_inverse().ok_or("singular covariance")?;
        let half = 12.0 * s[(2, 2)].sqrt();
        let f = |z: f64| {
            let v = Vector3::new(0.0, 0.0, z);
            (-0.5 * v.dot(&(inv * v))).exp()
        };
        let exact = adaptive_simpson(&f, -half, half, 1e-14);
        worst = worst.max((g - exact).abs() / exact);
    }
    ensure(worst < 1e-6, format!("worst quadrature error {worst:e}"))?;
    let mut worst_iso: f64 = 0.0;
    for _ in 0..50 {
        let sigma: f64 = r.gen_range(0.1..20.0);
        let s = covariance_from_scale_rotation(&[sigma.ln(); 3], &random_quat(&mut r)).0;
        let g = gamma(&s, &s.fixed_view::<2, 2>(0, 0).into_owned()).map_err(|e| e.to_string())?;
        let expected = sigma * (2.0 * std::f64::consts::PI).sqrt();
        worst_iso = worst_iso.max((g - expected).abs() / expected);
    }
    ensure(worst_iso <= 1e-12, format!("isotropic closed form off by {worst_iso:e}"))?;
    Ok(format!("quadrature {worst:.2e}, isotropic {worst_iso:.2e}"))
}

fn view_invariance() -> Outcome {
    let mut r = rng(11);
    let mut cloud = GaussianCloud::new();
    for _ in 0..40 {
        let pos = std::array::from_fn(|_| r.gen_range(-8.0..8.0));
        let ls = std::array::from_fn(|_| r.gen_range(0.6f64.ln()..3.0f64.ln()));
        cloud.push(pos, ls, random_quat(&mut r), r.gen_range(-1.0..2.0));
    }
    let angles: Vec<f64> = (-17..=17).map(|k| 5.0 * k as f64).collect();
    let geom = TiltGeometry::new(angles, DetectorGrid::square(64), BeamModel::parallel()).map_err(|e| e.to_string())?;
    let masses: Vec<f64> = render_all(&cloud, &geom).images.iter().map(|i| i.sum()).collect();
    let (lo, hi) = masses.iter().fold((f64::MAX, f64::MIN), |(a, b), &m| (a.min(m), b.max(m)));
    let spread = (hi - lo) / hi;
    ensure(spread <= 5e-3, format!("mass spread {spread:e} across ±85°"))?;
    Ok(format!("mass spread {spread:.2e} over 35 views"))
}

fn adjointness() -> Outcome {
    let mut r = rng(77);
    let grid = GridSpec::centered_cube(16, 1.0);
    let geom = TiltGeometry::new(vec![-63.0, -20.0, 0.0, 17.5, 45.0, 71.0], DetectorGrid::square(16), BeamModel::parallel())
        .map_err(|e| e.to_string())?;
    let v = Volume::from_data(grid, (0..grid.len()).map(|_| r.gen_range(-1.0..1.0)).collect()).map_err(|e| e.to_string())?;
    let mut p = ProjectionStack::zeros(&geom);
    for img in &mut p.images {
        img.data.iter_mut().for_each(|x| *x = r.gen_range(-1.0..1.0));
    }
    let lhs = project_all(&v, &geom).dot(&p);
    let rhs = v.dot(&backproject(&p, &geom, &grid).map_err(|e| e.to_string())?);
    let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs());
    ensure(rel <= 1e-6, format!("<Av,p> = {lhs}, <v,A^T p> = {rhs}"))?;
    Ok(format!("relative mismatch {rel:.2e}"))
}

fn unit_fixtures() -> Outcome {
    let p = psnr(&[0.0, 0.0], &[1.0, 0.0], 1.0).map_err(|e| e.to_string())?;
    ensure((p - 3.0103).abs() < 5e-5, format!("two-pixel PSNR {p}"))?;

    let mut r = rng(8);
    let img = ProjectionImage::from_data(16, 16, (0..256).map(|_| r.gen_range(0.0..1.0)).collect()).map_err(|e| e.to_string())?;
    let s = ssim(&img, &img, 1.0).map_err(|e| e.to_string())?;
    ensure(s == 1.0, format!("SSIM(x,x) = {s}"))?;

    let flat = Volume::from_data(GridSpec::centered(5, 4, 3, 1.0), vec![0.7; 60]).map_err(|e| e.to_string())?;
    let tv = tv3d(&flat, TvMode::Axial3).map_err(|e| e.to_string())?.0 + tv3d(&flat, TvMode::Neighbor8).map_err(|e| e.to_string())?.0;
    ensure(tv == 0.0, format!("TV(constant) = {tv}"))?;

    let f = fourier_amplitude(&img, &img, 1.0).map_err(|e| e.to_string())?.0;
    ensure(f == 0.0, format!("Fourier loss of identical images = {f}"))?;

    let renders: Vec<ProjectionImage> = (0..3)
        .map(|_| ProjectionImage::from_data(16, 16, (0..256).map(|_| r.gen_range(0.0..2.0)).collect()).unwrap())
        .collect();
    let meas: Vec<ProjectionImage> = (0..3)
        .map(|_| ProjectionImage::from_data(16, 16, (0..256).map(|_| r.gen_range(0.0..2.0)).collect()).unwrap())
        .collect();
    let vol = Volume::from_data(GridSpec::centered_cube(6, 1.0), (0..216).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
    let w = LossWeights { lambda_pixel: 0.7, lambda_freq: 0.13, lambda_ssim: 0.29, lambda_3dtv: 0.031, lambda_hf: 1.0 };
    let rep = total_loss(&renders, &meas, Some(&vol), &w, &LossOptions { data_range: 2.0, tv_mode: TvMode::Axial3 })
        .map_err(|e| e.to_string())?;
    let recomposed = w.lambda_pixel * rep.pixel + w.lambda_freq * rep.freq + w.lambda_ssim * rep.ssim + w.lambda_3dtv * rep.tv3d;
    ensure((recomposed - rep.total).abs() <= 1e-12, format!("recomposition off by {:e}", recomposed - rep.total))?;
    Ok(format!("PSNR {p:.4} dB, SSIM 1, TV 0, Fourier 0, recomposition exact"))
}

fn round_trips(dir: &Path) -> Outcome {
    let mut r = rng(10);
    let data: Vec<f32> = (0..512).map(|_| r.gen_range(-3.0f32..3.0)).collect();
    let mrc = MrcData { nx: 8, ny: 8, nz: 8, cell: [8.0; 3], origin: [0.0; 3], data };
    let path = dir.join("round.mrc");
    io::write_mrc(&path, &mrc).map_err(|e| e.to_string())?;
    let back = io::read_mrc(&path).map_err(|e| e.to_string())?;
    let bits = |m: &MrcData| m.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    ensure(bits(&back) == bits(&mrc), "MRC data changed in round trip")?;
    ensure(fs::read(&path).unwrap() == back.to_bytes().unwrap(), "MRC bytes changed on rewrite")?;

    let mut cloud = GaussianCloud::new();
    for _ in 0..25 {
        let f = |x: f64| x as f32 as f64;
        let q = random_quat(&mut r).map(f);
        cloud.push(std::array::from_fn(|_| f(r.gen_range(-9.0..9.0))), std::array::from_fn(|_| f(r.gen_range(-1.0..2.0))), q, f(r.gen_range(-4.0..4.0)));
    }
    let cpath = dir.join("round.dzgc");
    io::write_cloud(&cpath, &cloud).map_err(|e| e.to_string())?;
    let cback = io::read_cloud(&cpath).map_err(|e| e.to_string())?;
    ensure(cback == cloud, "cloud parameters changed in round trip")?;
    ensure(cloud_to_bytes(&cloud_from_bytes(&fs::read(&cpath).unwrap(), &cpath).unwrap()) == fs::read(&cpath).unwrap(), "checkpoint bytes changed")?;

    let cfg = RunConfig { iterations: 123, lambda_freq: 0.25, beam: denza::BeamKind::Cone, stack: PathBuf::from("x/y.mrc"), ..Default::default() };
    let echoed: RunConfig = toml::from_str(&cfg.to_toml()).map_err(|e| e.to_string())?;
    ensure(echoed == cfg, "config echo does not reload to the same value")?;
    ensure(echoed.to_toml() == cfg.to_toml(), "config echo is not a fixed point")?;
    Ok("MRC bitwise, checkpoint bitwise, config echo closed".into())
}

/// Shared fixture pipeline driven through the command-line entry point.
struct Fixture {
    dir: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn run(&self, cmd: &str, out: &str, extra: &[&str]) -> Result<Duration, String> {
        let out_dir = self.path(out);
        let mut args = vec!["denza".to_string(), cmd.into(), "--config".into(), self.config.display().to_string()];
        args.extend(["--output-dir".into(), out_dir.display().to_string()]);
        args.extend(extra.iter().map(|s| s.to_string()));
        let t = Instant::now();
        let code = denza::cli::run(args);
        ensure(code == 0, format!("`denza {cmd}` exited with {code}"))?;
        Ok(t.elapsed())
    }

    fn p(&self, rel: &str) -> String {
        self.path(rel).display().to_string()
    }

    fn test_psnr(&self, metrics: &str) -> Result<f64, String> {
        let text = fs::read_to_string(self.path(metrics)).map_err(|e| e.to_string())?;
        text.lines()
            .find_map(|l| l.strip_prefix("test,"))
            .and_then(|l| l.split(',').nth(1))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| format!("no test row in {metrics}"))
    }
}

struct FixtureRun {
    fx: Fixture,
    baseline_time: Duration,
    train_time: Duration,
}

fn build_fixture(dir: &Path) -> Result<FixtureRun, String> {
    let fx = Fixture { dir: dir.to_path_buf(), config: Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/fixture_a.toml") };
    fx.run("phantom", "phantom", &[])?;
    let gt = fx.p("phantom/phantom.mrc");
    fx.run("simulate", "sim", &["--volume", &gt])?;
    let stack = fx.p("sim/stack.mrc");
    let angles = fx.p("sim/angles.tlt");
    let input = ["--stack", stack.as_str(), "--angles", angles.as_str()];

    let t_fdk = fx.run("fdk", "fdk", &[&input[..], &["--filter", "ramlak"]].concat())?;
    fx.run("sirt", "sirt", &input)?;
    for m in ["fdk", "sirt"] {
        let vol = fx.p(&format!("{m}/{m}.mrc"));
        fx.run("evaluate", &format!("{m}/eval"), &[&input[..], &["--volume", &vol, "--gt-volume", &gt]].concat())?;
    }
    // Initialisation uses the configured (smoother) filter.
    let t_init = fx.run("fdk", "init", &input)?;
    let t_seed = fx.run("seed", "seed", &["--volume", &fx.p("init/fdk.mrc")])?;
    let cloud = fx.p("seed/seed.dzgc");
    let t_train = fx.run("train", "ours", &[&input[..], &["--cloud", &cloud]].concat())?;
    fx.run("evaluate", "ours/eval", &[&input[..], &["--cloud", &fx.p("ours/cloud.dzgc"), "--gt-volume", &gt]].concat())?;
    fx.run("ablate", "ablate", &[&input[..], &["--cloud", &cloud, "--gt-volume", &gt]].concat())?;
    Ok(FixtureRun { fx, baseline_time: t_fdk, train_time: t_init + t_seed + t_train })
}

fn method_ordering(run: &FixtureRun) -> Outcome {
    let fdk = run.fx.test_psnr("fdk/eval/metrics.csv")?;
    let sirt = run.fx.test_psnr("sirt/eval/metrics.csv")?;
    let ours = run.fx.test_psnr("ours/eval/metrics.csv")?;
    let minutes = (run.baseline_time + run.train_time).as_secs_f64() / 60.0;
    let detail = format!("test PSNR ours {ours:.2} dB, SIRT {sirt:.2} dB, FDK {fdk:.2} dB; run {minutes:.1} min");
    ensure(ours >= sirt + 2.0 && sirt >= fdk + 2.0, detail.clone())?;
    ensure(minutes < 15.0, detail.clone())?;
    Ok(detail)
}

fn ablation_rows(run: &FixtureRun) -> Result<Vec<denza::cli::AblationRow>, String> {
    read_ablation_csv(&run.fx.path("ablate/ablation.csv")).map_err(|e| e.to_string())
}

fn gamma_ablation(run: &FixtureRun) -> Outcome {
    let rows = ablation_rows(run)?;
    let get = |n: &str| rows.iter().find(|r| r.variant == n).cloned().ok_or(format!("no {n} row"));
    let (full, off) = (get("full")?, get("no_gamma")?);
    let drop = full.test_psnr - off.test_psnr;
    let detail = format!("full {:.2} dB, γ = 1 {:.2} dB, drop {drop:.2} dB", full.test_psnr, off.test_psnr);
    ensure(drop >= 5.0, detail.clone())?;
    Ok(detail)
}

fn fourier_ablation(run: &FixtureRun) -> Outcome {
    let rows = ablation_rows(run)?;
    let get = |n: &str| rows.iter().find(|r| r.variant == n).cloned().ok_or(format!("no {n} row"));
    let (full, off) = (get("full")?, get("no_freq")?);
    let (tv_full, tv_off) = (full.tv_error.ok_or("no TV column")?, off.tv_error.ok_or("no TV column")?);
    let detail = format!(
        "test PSNR full {:.2} / no-freq {:.2} dB; TV of error full {tv_full:.4e} / no-freq {tv_off:.4e}",
        full.test_psnr, off.test_psnr
    );
    ensure(off.test_psnr <= full.test_psnr && tv_off >= tv_full, detail.clone())?;
    Ok(detail)
}

fn determinism(dir: &Path, fixture: Option<&FixtureRun>) -> Outcome {
    // A small configuration run twice from scratch.
    fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let small = dir.join("small.toml");
    fs::write(
        &small,
        "grid_size = 32\ndetector_size = 32\nn_views = 15\nn_points = 600\niterations = 30\ntv_grid_size = 16\n\
         prune_interval = 10\ndensify_interval = 10\ncheckpoint_interval = 15\nviews_per_step = 3\nrng_seed = 21\n\
         dose = 500.0\nsirt_iterations = 5\n",
    )
    .unwrap();
    let mut outputs = Vec::new();
    for rep in ["a", "b"] {
        let fx = Fixture { dir: dir.join(rep), config: small.clone() };
        fx.run("phantom", "phantom", &["--phantom", &write_small_phantom(dir)])?;
        fx.run("simulate", "sim", &["--volume", &fx.p("phantom/phantom.mrc")])?;
        let input = ["--stack".to_string(), fx.p("sim/stack.mrc")];
        fx.run("sirt", "sirt", &[input[0].as_str(), &input[1]])?;
        fx.run("seed", "seed", &["--volume", &fx.p("sirt/sirt.mrc")])?;
        fx.run("train", "train", &[input[0].as_str(), &input[1], "--cloud", &fx.p("seed/seed.dzgc")])?;
        fx.run("evaluate", "eval", &[input[0].as_str(), &input[1], "--cloud", &fx.p("train/cloud.dzgc"), "--gt-volume", &fx.p("phantom/phantom.mrc")])?;
        outputs.push(fx);
    }
    let files = [
        "sim/stack.mrc",
        "sirt/sirt.mrc",
        "seed/seed.dzgc",
        "train/checkpoint_000015.dzgc",
        "train/cloud.dzgc",
        "train/loss.csv",
        "train/volume.mrc",
        "eval/metrics.csv",
    ];
    for f in files {
        let (a, b) = (fs::read(outputs[0].path(f)), fs::read(outputs[1].path(f)));
        ensure(matches!((&a, &b), (Ok(x), Ok(y)) if x == y), format!("{f} differs between runs"))?;
    }
    let mut detail = format!("{} artifacts bitwise identical", files.len());
    if let Some(run) = fixture {
        for f in ["cloud.dzgc", "loss.csv"] {
            let (a, b) = (fs::read(run.fx.path(&format!("ours/{f}"))), fs::read(run.fx.path(&format!("ablate/full/{f}"))));
            ensure(matches!((&a, &b), (Ok(x), Ok(y)) if x == y), format!("fixture {f} differs between train and ablate"))?;
        }
        detail.push_str("; fixture train and ablate runs identical");
    }
    Ok(detail)
}

fn write_small_phantom(dir: &Path) -> String {
    let p = dir.join("small_phantom.toml");
    fs::write(
        &p,
        "[grid]\nnx = 32\nny = 32\nnz = 32\nvoxel_size = 1.0\norigin = [-16.0, -16.0, -16.0]\n\n\
         [[primitives]]\nshape = \"shell\"\nouter = 7.0\ninner = 4.0\ncenter = [-3.0, 1.0, 2.0]\nvalue = 2.0\n\n\
         [[primitives]]\nshape = \"sphere\"\nradius = 4.0\ncenter = [-3.0, 1.0, 2.0]\nvalue = 1.0\n\n\
         [[primitives]]\nshape = \"blob\"\nsigma = [2.0, 1.5, 1.5]\ncenter = [7.0, -5.0, -4.0]\nvalue = 1.5\n",
    )
    .unwrap();
    p.display().to_string()
}

fn fixture_err(f: &Option<Result<FixtureRun, String>>) -> Result<&FixtureRun, String> {
    match f {
        Some(Ok(run)) => Ok(run),
        Some(Err(e)) => Err(format!("fixture pipeline failed: {e}")),
        None => Err("fixture pipeline not built".into()),
    }
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().map_or(true, |o| o.contains(&n));
    let work = tempfile::tempdir().expect("temporary directory");
    let started = Instant::now();

    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut check = |n: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(n) {
            return;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or(e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or("panic".into()))
        });
        let (tag, msg) = match &outcome {
            Ok(m) => ("PASS", m),
            Err(m) => ("FAIL", m),
        };
        println!("criterion {n:>2} {tag} {name} ({:.1} s): {msg}", t.elapsed().as_secs_f64());
        results.push((n, name, outcome));
    };

    check(1, "gradient correctness", &mut gradients);
    check(2, "gamma exactness", &mut gamma_exactness);
    check(3, "view invariance", &mut view_invariance);
    check(4, "projector adjointness", &mut adjointness);

    let fixture = if wanted(5) || wanted(6) || wanted(7) {
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(|| build_fixture(&work.path().join("fixture_a"))));
        let r = r.unwrap_or_else(|_| Err("fixture pipeline panicked".into()));
        println!("fixture A pipeline built in {:.1} min", t.elapsed().as_secs_f64() / 60.0);
        Some(r)
    } else {
        None
    };
    check(5, "method ordering", &mut || method_ordering(fixture_err(&fixture)?));
    check(6, "gamma ablation", &mut || gamma_ablation(fixture_err(&fixture)?));
    check(7, "Fourier-loss ablation", &mut || fourier_ablation(fixture_err(&fixture)?));
    check(8, "loss and metric fixtures", &mut unit_fixtures);
    check(9, "determinism", &mut || determinism(&work.path().join("determinism"), fixture.as_ref().and_then(|f| f.as_ref().ok())));
    check(10, "format round trips", &mut || round_trips(work.path()));

    let failed: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed in {:.1} min",
        results.len() - failed.len(),
        failed.len(),
        started.elapsed().as_secs_f64() / 60.0
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
