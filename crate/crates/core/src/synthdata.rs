//! Synthetic phantoms and simulated tilt series.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classical::project_volume;
use crate::error::{Error, Result};
use crate::gaussians::quat_to_matrix;
use crate::geometry::TiltGeometry;
use crate::volume::{GridSpec, ProjectionImage, ProjectionStack, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Shape {
    Sphere { radius: f64 },
    /// Outer sphere minus the inner one.
    Shell { outer: f64, inner: f64 },
    Box { half_size: [f64; 3] },
    /// Anisotropic Gaussian with peak 1 before scaling by the value.
    Blob { sigma: [f64; 3], #[serde(default = "identity_quat")] rotation: [f64; 4] },
}

fn identity_quat() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    pub center: [f64; 3],
    pub value: f64,
}

impl Primitive {
    /// Half-widths of the axis-aligned box holding the primitive (3σ for blobs).
    fn half_extent(&self) -> [f64; 3] {
        match self.shape {
            Shape::Sphere { radius } => [radius; 3],
            Shape::Shell { outer, .. } => [outer; 3],
            Shape::Box { half_size } => half_size,
            Shape::Blob { sigma, rotation } => {
                let r = quat_to_matrix(&rotation);
                std::array::from_fn(|a| 3.0 * (0..3).map(|k| (r[(a, k)] * sigma[k]).powi(2)).sum::<f64>().sqrt())
            }
        }
    }

    fn sample(&self, p: [f64; 3]) -> f64 {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        let inside = match self.shape {
            Shape::Sphere { radius } => r2 <= radius * radius,
            Shape::Shell { outer, inner } => r2 <= outer * outer && r2 > inner * inner,
            Shape::Box { half_size } => (0..3).all(|a| d[a].abs() <= half_size[a]),
            Shape::Blob { sigma, rotation } => {
                let r = quat_to_matrix(&rotation);
                let m: f64 = (0..3)
                    .map(|k| {
                        let local = r[(0, k)] * d[0] + r[(1, k)] * d[1] + r[(2, k)] * d[2];
                        (local / sigma[k]).powi(2)
                    })
                    .sum();
                return self.value * (-0.5 * m).exp();
            }
        };
        if inside {
            self.value
        } else {
            0.0
        }
    }

    fn validate(&self, grid: &GridSpec) -> Result<()> {
        if !(self.value > 0.0 && self.value.is_finite()) {
            return Err(Error::Config(format!("primitive value must be positive, got {}", self.value)));
        }
        let sizes_ok = match self.shape {
            Shape::Sphere { radius } => radius > 0.0,
            Shape::Shell { outer, inner } => outer > inner && inner >= 0.0,
            Shape::Box { half_size } => half_size.iter().all(|h| *h > 0.0),
            Shape::Blob { sigma, .. } => sigma.iter().all(|s| *s > 0.0),
        };
        if !sizes_ok {
            return Err(Error::Config(format!("invalid primitive size: {:?}", self.shape)));
        }
        let half = self.half_extent();
        let dims = grid.dims();
        for a in 0..3 {
            let lo = grid.origin[a];
            let hi = lo + dims[a] as f64 * grid.voxel_size;
            if self.center[a] - half[a] < lo - 1e-9 || self.center[a] + half[a] > hi + 1e-9 {
                return Err(Error::Domain(format!(
                    "primitive {:?} at {:?} extends outside the grid along axis {a}",
                    self.shape, self.center
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid: GridSpec,
    #[serde(default)]
    pub primitives: Vec<Primitive>,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        self.primitives.iter().try_for_each(|p| p.validate(&self.grid))
    }
}

/// Two off-centre core-shell particles on a 64³ grid: cores of value 1.0
/// inside high-Z shells of value 2.0. The arrangement has no symmetry about
/// the tilt axis, so every view differs.
pub fn fixture_a() -> PhantomSpec {
    let particle = |center: [f64; 3], outer: f64, inner: f64| {
        [
            Primitive { shape: Shape::Shell { outer, inner }, center, value: 2.0 },
            Primitive { shape: Shape::Sphere { radius: inner }, center, value: 1.0 },
        ]
    };
    let mut primitives = particle([-7.0, 2.0, 5.0], 13.0, 8.0).to_vec();
    primitives.extend(particle([13.0, -6.0, -8.0], 7.0, 4.0));
    PhantomSpec { grid: GridSpec::centered_cube(64, 1.0), primitives }
}

/// Sum of primitive fields, averaged over 2×2×2 sub-samples per voxel.
pub fn build_phantom(spec: &PhantomSpec) -> Result<Volume> {
    spec.validate()?;
    let g = spec.grid;
    let q = 0.25 * g.voxel_size;
    let plane = g.nx * g.ny;
    let slices: Vec<Vec<f64>> = (0..g.nz)
        .into_par_iter()
        .map(|k| {
            let mut out = vec![0.0; plane];
            for j in 0..g.ny {
                for i in 0..g.nx {
                    let c = g.center(i, j, k);
                    let mut acc = 0.0;
                    for s in 0..8 {
                        let p = [
                            c[0] + if s & 1 == 0 { -q } else { q },
                            c[1] + if s & 2 == 0 { -q } else { q },
                            c[2] + if s & 4 == 0 { -q } else { q },
                        ];
                        acc += spec.primitives.iter().map(|pr| pr.sample(p)).sum::<f64>();
                    }
                    out[i + g.nx * j] = acc / 8.0;
                }
            }
            out
        })
        .collect();
    Volume::from_data(g, slices.concat())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Expected counts at unit intensity; 0 disables shot noise.
    pub dose: f64,
    /// Additive read-noise standard deviation.
    pub gaussian_sigma: f64,
    pub rng_seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { dose: 0.0, gaussian_sigma: 0.0, rng_seed: 0 }
    }
}

impl NoiseModel {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dose >= 0.0 && self.dose.is_finite()) || !(self.gaussian_sigma >= 0.0 && self.gaussian_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "dose and gaussian_sigma must be finite and non-negative, got {} and {}",
                self.dose, self.gaussian_sigma
            )));
        }
        Ok(())
    }

    pub fn is_disabled(&self) -> bool {
        self.dose == 0.0 && self.gaussian_sigma == 0.0
    }

    /// Corrupt one image in place; `stream` separates the per-view generators.
    pub fn apply(&self, img: &mut ProjectionImage, stream: u64) {
        if self.is_disabled() {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(stream);
        let normal = (self.gaussian_sigma > 0.0).then(|| Normal::new(0.0, self.gaussian_sigma).unwrap());
        for x in img.data.iter_mut() {
            let mut y = *x;
            if self.dose > 0.0 {
                let lambda = self.dose * y.max(0.0);
                y = if lambda > 0.0 { Poisson::new(lambda).unwrap().sample(&mut rng) / self.dose } else { 0.0 };
            }
            if let Some(n) = &normal {
                y += n.sample(&mut rng);
            }
            *x = y.max(0.0);
        }
    }
}

/// Separable Gaussian blur with zero padding; `sigma` in pixels.
pub fn gaussian_blur(img: &ProjectionImage, sigma: f64) -> ProjectionImage {
    if !(sigma > 0.0) {
        return img.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|d| (-0.5 * (d as f64 / sigma).powi(2)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|x| *x /= s);
    let (nu, nv) = (img.nu as isize, img.nv as isize);
    let pass = |src: &[f64], along_u: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for v in 0..nv {
            for u in 0..nu {
                let mut acc = 0.0;
                for (t, w) in k.iter().enumerate() {
                    let d = t as isize - r;
                    let (uu, vv) = if along_u { (u + d, v) } else { (u, v + d) };
                    if uu >= 0 && uu < nu && vv >= 0 && vv < nv {
                        acc += w * src[(uu + nu * vv) as usize];
                    }
                }
                out[(u + nu * v) as usize] = acc;
            }
        }
        out
    };
    let mut out = img.clone();
    out.data = pass(&pass(&img.data, true), false);
    out
}

/// Project the volume through every view, then blur by the probe size when
/// the beam has one, then apply noise.
pub fn simulate_tilt_series(vol: &Volume, geom: &TiltGeometry, noise: &NoiseModel) -> Result<ProjectionStack> {
    noise.validate()?;
    let probe_px = geom.beam().probe_sigma / geom.detector().pixel_size;
    let images = (0..geom.n_views())
        .into_par_iter()
        .map(|v| {
            let mut img = gaussian_blur(&project_volume(vol, geom, v), probe_px);
            noise.apply(&mut img, v as u64);
            img
        })
        .collect();
    ProjectionStack::new(images)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPattern {
    /// Hold out the middle view of every block of `k`.
    EveryKthHeldOut(usize),
    /// Train on the middle view of every block of `k`, test on the rest.
    EveryKthTrained(usize),
    Explicit { train: Vec<usize>, test: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_views(n_views: usize, pattern: &SplitPattern) -> Result<ViewSplit> {
    let split = match pattern {
        SplitPattern::EveryKthHeldOut(k) => {
            if *k == 0 {
                return Err(Error::Config("hold-out stride must be at least 1".into()));
            }
            let (test, train): (Vec<usize>, Vec<usize>) = (0..n_views).partition(|i| i % k == k / 2);
            ViewSplit { train, test }
        }
        SplitPattern::EveryKthTrained(k) => {
            if *k == 0 {
                return Err(Error::Config("training stride must be at least 1".into()));
            }
            let (train, test): (Vec<usize>, Vec<usize>) = (0..n_views).partition(|i| i % k == k / 2);
            ViewSplit { train, test }
        }
        SplitPattern::Explicit { train, test } => {
            let mut seen = vec![false; n_views];
            for &i in train.iter().chain(test) {
                if i >= n_views {
                    return Err(Error::Config(format!("view {i} out of range for {n_views} views")));
                }
                if seen[i] {
                    return Err(Error::Config(format!("view {i} listed twice in the split")));
                }
                seen[i] = true;
            }
            ViewSplit { train: train.clone(), test: test.clone() }
        }
    };
    if split.train.is_empty() {
        return Err(Error::Config("view split leaves no training views".into()));
    }
    Ok(split)
}

/// Fixture split: train on every third view starting at the second, test
/// on the rest, so the training subset is symmetric about 0°.
pub fn every_third_train(n_views: usize) -> Result<ViewSplit> {
    split_views(n_views, &SplitPattern::EveryKthTrained(3))
}
