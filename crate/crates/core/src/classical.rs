//! Voxel projector and its adjoint, FDK/FBP and SIRT reconstructors, and
//! point-cloud seeding from a coarse volume.

use std::f64::consts::PI;

use kiddo::{KdTree, SquaredEuclidean};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussians::{inverse_softplus, GaussianCloud, ScaleBounds};
use crate::geometry::{BeamKind, Ray, TiltGeometry, ViewFrame};
use crate::volume::{GridSpec, ProjectionImage, ProjectionStack, Volume};

/// Ray samples per voxel length.
const SAMPLES_PER_VOXEL: f64 = 2.0;

/// Ray segment `[t0, t1]` inside the volume's bounding box, if any.
fn clip_ray(ray: &Ray, grid: &GridSpec) -> Option<(f64, f64)> {
    let dims = grid.dims();
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let lo = grid.origin[a];
        let hi = lo + dims[a] as f64 * grid.voxel_size;
        let o = ray.origin[a];
        let d = ray.direction[a];
        if d.abs() < 1e-15 {
            if o < lo || o > hi {
                return None;
            }
        } else {
            let (mut ta, mut tb) = ((lo - o) / d, (hi - o) / d);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
    }
    (t1 > t0).then_some((t0, t1))
}

/// Trilinear stencil at continuous index coordinates, clamped to the grid.
#[inline]
fn stencil(grid: &GridSpec, c: [f64; 3]) -> ([usize; 2], [usize; 2], [usize; 2], [f64; 3]) {
    let dims = grid.dims();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let n = dims[a];
        let x = c[a].clamp(0.0, (n - 1) as f64);
        let i = (x.floor() as usize).min(n - 1);
        lo[a] = i;
        hi[a] = (i + 1).min(n - 1);
        frac[a] = x - i as f64;
    }
    ([lo[0], hi[0]], [lo[1], hi[1]], [lo[2], hi[2]], frac)
}

/// Visit every (voxel index, weight) pair of the discretised line integral
/// along `ray`. Shared by the projector and its adjoint so they are exact
/// transposes.
#[inline]
fn for_each_sample(ray: &Ray, grid: &GridSpec, mut f: impl FnMut(usize, f64)) {
    let Some((t0, t1)) = clip_ray(ray, grid) else { return };
    let len = t1 - t0;
    let n = (len * SAMPLES_PER_VOXEL / grid.voxel_size).ceil().max(1.0) as usize;
    let h = len / n as f64;
    for k in 0..n {
        let p = ray.at(t0 + (k as f64 + 0.5) * h);
        let c = grid.to_index([p.x, p.y, p.z]);
        let (xs, ys, zs, fr) = stencil(grid, c);
        let wx = [1.0 - fr[0], fr[0]];
        let wy = [1.0 - fr[1], fr[1]];
        let wz = [1.0 - fr[2], fr[2]];
        for (kz, &z) in zs.iter().enumerate() {
            if wz[kz] == 0.0 {
                continue;
            }
            for (ky, &y) in ys.iter().enumerate() {
                let wyz = wy[ky] * wz[kz];
                if wyz == 0.0 {
                    continue;
                }
                for (kx, &x) in xs.iter().enumerate() {
                    let w = wx[kx] * wyz;
                    if w != 0.0 {
                        f(grid.index(x, y, z), w * h);
                    }
                }
            }
        }
    }
}

/// Line integrals of the trilinearly interpolated volume through every pixel
/// centre of one view.
pub fn project_volume(vol: &Volume, geom: &TiltGeometry, view: usize) -> ProjectionImage {
    let frame = geom.frame(view).expect("view index within geometry");
    let det = frame.detector;
    let rows: Vec<Vec<f64>> = (0..det.nv)
        .into_par_iter()
        .map(|v| {
            (0..det.nu)
                .map(|u| {
                    let ray = frame.ray(u as f64 + 0.5, v as f64 + 0.5);
                    let mut acc = 0.0;
                    for_each_sample(&ray, &vol.grid, |idx, w| acc += w * vol.data[idx]);
                    acc
                })
                .collect()
        })
        .collect();
    let mut img = ProjectionImage::for_detector(&det, view, geom.angles_deg()[view]);
    img.data = rows.concat();
    img
}

pub fn project_all(vol: &Volume, geom: &TiltGeometry) -> ProjectionStack {
    ProjectionStack { images: (0..geom.n_views()).map(|v| project_volume(vol, geom, v)).collect() }
}

/// Adjoint of [`project_all`]: smear every pixel value back along its ray.
pub fn backproject(stack: &ProjectionStack, geom: &TiltGeometry, grid: &GridSpec) -> Result<Volume> {
    stack.check_geometry(geom)?;
    let parts: Vec<Vec<f64>> = (0..geom.n_views())
        .into_par_iter()
        .map(|view| {
            let frame = geom.frame(view).expect("view index within geometry");
            let det = frame.detector;
            let img = &stack.images[view];
            let mut acc = vec![0.0; grid.len()];
            for v in 0..det.nv {
                for u in 0..det.nu {
                    let r = img.data[u + det.nu * v];
                    if r == 0.0 {
                        continue;
                    }
                    let ray = frame.ray(u as f64 + 0.5, v as f64 + 0.5);
                    for_each_sample(&ray, grid, |idx, w| acc[idx] += w * r);
                }
            }
            acc
        })
        .collect();
    let mut out = Volume::zeros(*grid);
    for part in &parts {
        for (o, p) in out.data.iter_mut().zip(part) {
            *o += p;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RampFilter {
    RamLak,
    Hann,
}

impl std::str::FromStr for RampFilter {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ramlak" | "ram-lak" => Ok(Self::RamLak),
            "hann" => Ok(Self::Hann),
            _ => Err(Error::Config(format!("unknown filter {s:?} (expected ramlak or hann)"))),
        }
    }
}

/// Frequency response of the band-limited ramp filter (spatial Ram-Lak
/// kernel, zero padded), optionally Hann apodised.
fn ramp_response(n_fft: usize, pixel_size: f64, filter: RampFilter) -> Vec<f64> {
    let mut kernel = vec![Complex64::new(0.0, 0.0); n_fft];
    let tau2 = pixel_size * pixel_size;
    kernel[0].re = 1.0 / (4.0 * tau2);
    for k in 1..n_fft / 2 {
        if k % 2 == 1 {
            let val = -1.0 / (PI * PI * (k * k) as f64 * tau2);
            kernel[k].re = val;
            kernel[n_fft - k].re = val;
        }
    }
    FftPlanner::new().plan_fft_forward(n_fft).process(&mut kernel);
    kernel
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let h = c.re * pixel_size;
            match filter {
                RampFilter::RamLak => h,
                RampFilter::Hann => {
                    let f = i.min(n_fft - i) as f64 / n_fft as f64; // 0 .. 0.5
                    h * 0.5 * (1.0 + (2.0 * PI * f).cos())
                }
            }
        })
        .collect()
}

fn filter_rows(img: &ProjectionImage, response: &[f64], planner: &mut FftPlanner<f64>) -> ProjectionImage {
    let n_fft = response.len();
    let fwd = planner.plan_fft_forward(n_fft);
    let inv = planner.plan_fft_inverse(n_fft);
    let mut out = img.clone();
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for v in 0..img.nv {
        buf.fill(Complex64::new(0.0, 0.0));
        for u in 0..img.nu {
            buf[u].re = img.data[u + img.nu * v];
        }
        fwd.process(&mut buf);
        for (b, h) in buf.iter_mut().zip(response) {
            *b *= *h;
        }
        inv.process(&mut buf);
        for u in 0..img.nu {
            out.data[u + img.nu * v] = buf[u].re / n_fft as f64;
        }
    }
    out
}

#[inline]
fn bilinear(img: &ProjectionImage, u: f64, v: f64) -> f64 {
    // pixel centres at half-integers
    let x = u - 0.5;
    let y = v - 0.5;
    if x < -0.5 || y < -0.5 || x > img.nu as f64 - 0.5 || y > img.nv as f64 - 0.5 {
        return 0.0;
    }
    let x = x.clamp(0.0, (img.nu - 1) as f64);
    let y = y.clamp(0.0, (img.nv - 1) as f64);
    let (i, j) = (x.floor() as usize, y.floor() as usize);
    let (i1, j1) = ((i + 1).min(img.nu - 1), (j + 1).min(img.nv - 1));
    let (fx, fy) = (x - i as f64, y - j as f64);
    let a = img.get(i, j) * (1.0 - fx) + img.get(i1, j) * fx;
    let b = img.get(i, j1) * (1.0 - fx) + img.get(i1, j1) * fx;
    a * (1.0 - fy) + b * fy
}

/// Feldkamp–Davis–Kress reconstruction; per-slice filtered backprojection for
/// parallel beams.
pub fn fdk_reconstruct(stack: &ProjectionStack, geom: &TiltGeometry, grid: &GridSpec, filter: RampFilter) -> Result<Volume> {
    stack.check_geometry(geom)?;
    if geom.n_views() < 2 {
        return Err(Error::Geometry(format!("FDK needs at least 2 views, got {}", geom.n_views())));
    }
    let det = *geom.detector();
    let n_fft = (2 * det.nu).next_power_of_two();
    let response = ramp_response(n_fft, det.pixel_size, filter);
    let mut planner = FftPlanner::new();
    let frames: Vec<ViewFrame> = (0..geom.n_views()).map(|v| geom.frame(v)).collect::<Result<_>>()?;

    let filtered: Vec<ProjectionImage> = stack
        .images
        .iter()
        .zip(&frames)
        .map(|(img, frame)| {
            let mut weighted = img.clone();
            if frame.beam.kind == BeamKind::Cone {
                let d = frame.beam.source_distance;
                for v in 0..det.nv {
                    for u in 0..det.nu {
                        let (x, y) = det.pixel_to_plane(u as f64 + 0.5, v as f64 + 0.5);
                        weighted.data[u + det.nu * v] *= d / (d * d + x * x + y * y).sqrt();
                    }
                }
            }
            filter_rows(&weighted, &response, &mut planner)
        })
        .collect();

    let scale = PI / geom.n_views() as f64;
    let slices: Vec<Vec<f64>> = (0..grid.nz)
        .into_par_iter()
        .map(|k| {
            let mut slab = vec![0.0; grid.nx * grid.ny];
            for (frame, q) in frames.iter().zip(&filtered) {
                for j in 0..grid.ny {
                    for i in 0..grid.nx {
                        let p = nalgebra::Vector3::from(grid.center(i, j, k));
                        let Ok((u, v, depth)) = frame.project(&p) else { continue };
                        let w = match frame.beam.kind {
                            BeamKind::Parallel => 1.0,
                            BeamKind::Cone => {
                                let m = frame.beam.source_distance / depth;
                                m * m
                            }
                        };
                        slab[i + grid.nx * j] += w * bilinear(q, u, v);
                    }
                }
            }
            slab.iter_mut().for_each(|x| *x *= scale);
            slab
        })
        .collect();
    Volume::from_data(*grid, slices.concat())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SirtConfig {
    pub iterations: usize,
    pub relaxation: f64,
    pub nonneg: bool,
}

impl Default for SirtConfig {
    fn default() -> Self {
        Self { iterations: 100, relaxation: 1.0, nonneg: true }
    }
}

/// SIRT: `v ← v + λ C Aᵀ R (p − A v)` from `v₀ = 0`. The optional callback
/// sees the residual norm before each update.
pub fn sirt_reconstruct_with(
    stack: &ProjectionStack,
    geom: &TiltGeometry,
    grid: &GridSpec,
    cfg: &SirtConfig,
    mut on_residual: impl FnMut(usize, f64),
) -> Result<Volume> {
    stack.check_geometry(geom)?;
    if cfg.iterations == 0 {
        return Err(Error::Config("SIRT needs at least one iteration".into()));
    }
    if !(cfg.relaxation > 0.0 && cfg.relaxation <= 2.0) {
        return Err(Error::Config(format!("relaxation must lie in (0, 2], got {}", cfg.relaxation)));
    }
    let ones = Volume { grid: *grid, data: vec![1.0; grid.len()] };
    let row_sums = project_all(&ones, geom);
    let mut ones_stack = row_sums.clone();
    ones_stack.images.iter_mut().for_each(|i| i.data.fill(1.0));
    let col_sums = backproject(&ones_stack, geom, grid)?;
    let inv = |x: f64| if x > 1e-12 { 1.0 / x } else { 0.0 };

    let mut vol = Volume::zeros(*grid);
    for it in 0..cfg.iterations {
        let fwd = project_all(&vol, geom);
        let mut resid = fwd;
        let mut norm2 = 0.0;
        for ((r, p), w) in resid.images.iter_mut().zip(&stack.images).zip(&row_sums.images) {
            for ((ri, pi), wi) in r.data.iter_mut().zip(&p.data).zip(&w.data) {
                let e = pi - *ri;
                norm2 += e * e;
                *ri = e * inv(*wi);
            }
        }
        on_residual(it, norm2.sqrt());
        let upd = backproject(&resid, geom, grid)?;
        for ((x, u), c) in vol.data.iter_mut().zip(&upd.data).zip(&col_sums.data) {
            *x += cfg.relaxation * inv(*c) * u;
            if cfg.nonneg && *x < 0.0 {
                *x = 0.0;
            }
        }
    }
    Ok(vol)
}

pub fn sirt_reconstruct(stack: &ProjectionStack, geom: &TiltGeometry, grid: &GridSpec, cfg: &SirtConfig) -> Result<Volume> {
    sirt_reconstruct_with(stack, geom, grid, cfg, |_, _| {})
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedConfig {
    pub n_points: usize,
    pub threshold_percentile: f64,
    pub rng_seed: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self { n_points: 20_000, threshold_percentile: 75.0, rng_seed: 0 }
    }
}

/// Floor applied to seed intensities before the inverse softplus.
pub const SEED_DENZA_FLOOR: f64 = 1e-3;

/// Sample an initial Gaussian cloud from the bright voxels of a volume.
pub fn seed_cloud(vol: &Volume, cfg: &SeedConfig) -> Result<GaussianCloud> {
    if !(cfg.threshold_percentile >= 0.0 && cfg.threshold_percentile < 100.0) {
        return Err(Error::Config(format!("threshold_percentile must lie in [0, 100), got {}", cfg.threshold_percentile)));
    }
    if cfg.n_points == 0 {
        return Ok(GaussianCloud::new());
    }
    let mut sorted = vol.data.clone();
    sorted.sort_by(f64::total_cmp);
    let rank = (cfg.threshold_percentile / 100.0 * (sorted.len() - 1) as f64).round() as usize;
    let threshold = sorted[rank];

    let candidates: Vec<usize> = (0..vol.data.len())
        .filter(|&i| vol.data[i] >= threshold && vol.data[i] > 0.0)
        .collect();
    if candidates.len() < cfg.n_points {
        return Err(Error::Seeding(format!(
            "{} voxels above the {}th percentile (threshold {threshold:.4}), {} requested",
            candidates.len(),
            cfg.threshold_percentile,
            cfg.n_points
        )));
    }

    // Weighted sampling without replacement (Efraimidis–Spirakis keys).
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut keyed: Vec<(f64, usize)> = candidates
        .iter()
        .map(|&i| {
            let r: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            (r.ln() / vol.data[i], i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.truncate(cfg.n_points);
    keyed.sort_by_key(|k| k.1);

    let g = &vol.grid;
    let mut positions = Vec::with_capacity(cfg.n_points);
    let mut intensities = Vec::with_capacity(cfg.n_points);
    for &(_, idx) in &keyed {
        let i = idx % g.nx;
        let j = (idx / g.nx) % g.ny;
        let k = idx / (g.nx * g.ny);
        let c = g.center(i, j, k);
        let jitter: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.5..0.5) * g.voxel_size);
        positions.push([c[0] + jitter[0], c[1] + jitter[1], c[2] + jitter[2]]);
        intensities.push(vol.data[idx]);
    }

    let nn = mean_nearest_neighbor(&positions).unwrap_or(g.voxel_size);
    let bounds = ScaleBounds::for_extent(g.extent());
    let log_scale = bounds.clamp_log((0.7 * nn).ln());
    let mut cloud = GaussianCloud::with_capacity(cfg.n_points);
    for (p, d) in positions.into_iter().zip(intensities) {
        cloud.push(p, [log_scale; 3], [1.0, 0.0, 0.0, 0.0], inverse_softplus(d.max(SEED_DENZA_FLOOR)));
    }
    Ok(cloud)
}

/// Mean distance from each point to its nearest neighbour.
pub fn mean_nearest_neighbor(points: &[[f64; 3]]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let mut tree: KdTree<f64, 3> = KdTree::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        tree.add(p, i as u64);
    }
    let total: f64 = points
        .iter()
        .map(|p| {
            tree.nearest_n::<SquaredEuclidean>(p, 2)
                .iter()
                .map(|n| n.distance)
                .fold(f64::INFINITY, |best, d| if d > 0.0 { best.min(d) } else { best })
        })
        .map(|d2| if d2.is_finite() { d2.sqrt() } else { 0.0 })
        .sum();
    Some(total / points.len() as f64)
}
