//! Analytic gradients against central finite differences. Each case
//! returns the first mismatch, so the suite can be reported as well as
//! asserted.

use super::{central_diff, close, param_mut, random_quat, rng};
use denza::losses::{fourier_amplitude, pixel_l1, ssim_loss, tv3d, TvMode};
use denza::splatter::{render_backward, render_view};
use denza::voxelizer::{voxelize, voxelize_backward};
use denza::{BeamModel, CloudGradients, DetectorGrid, GaussianCloud, GridSpec, ProjectionImage, TiltGeometry, Volume};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Check = Result<(), String>;

pub const REL: f64 = 1e-4;
pub const ABS: f64 = 1e-7;
const H: f64 = 1e-5;

/// Gaussians wide enough that the truncation ellipse covers the whole
/// 8-pixel field, so the objective is smooth in every parameter.
fn wide_cloud(rng: &mut ChaCha8Rng, n: usize) -> GaussianCloud {
    let mut c = GaussianCloud::new();
    for _ in 0..n {
        let pos = std::array::from_fn(|_| rng.gen_range(-0.8..0.8));
        let ls = std::array::from_fn(|_| rng.gen_range(3.3f64.ln()..4.0f64.ln()));
        c.push(pos, ls, random_quat(rng), rng.gen_range(-1.0..1.5));
    }
    c
}

fn random_image(rng: &mut ChaCha8Rng, nu: usize, nv: usize) -> ProjectionImage {
    ProjectionImage::from_data(nu, nv, (0..nu * nv).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn check_cloud_grad(cloud: &GaussianCloud, analytic: &CloudGradients, mut objective: impl FnMut(&GaussianCloud) -> f64, label: &str) -> Check {
    for i in 0..cloud.len() {
        for p in 0..11 {
            let x0 = *param_mut(&mut cloud.clone(), i, p);
            let mut f = |x: &[f64]| {
                let mut c = cloud.clone();
                *param_mut(&mut c, i, p) = x[0];
                objective(&c)
            };
            let numeric = central_diff(&mut f, &[x0], 0, H);
            let a = analytic.get(i, p);
            if !close(a, numeric, REL, ABS) {
                return Err(format!("{label}: gaussian {i} param {p}: analytic {a} vs numeric {numeric}"));
            }
        }
    }
    Ok(())
}

pub fn splatter(beam: BeamModel, seed: u64) -> Check {
    let mut r = rng(seed);
    let det = DetectorGrid::square(8);
    let geom = TiltGeometry::new(vec![-35.0, 0.0, 50.0], det, beam).unwrap();
    let cloud = wide_cloud(&mut r, 4);
    for view in 0..geom.n_views() {
        let w = random_image(&mut r, 8, 8);
        let analytic = render_backward(&cloud, &geom, view, &w);
        check_cloud_grad(&cloud, &analytic, |c| render_view(c, &geom, view).data.iter().zip(&w.data).map(|(a, b)| a * b).sum(), "splat")?;
    }
    Ok(())
}

pub fn voxelizer() -> Check {
    let mut r = rng(3);
    let grid = GridSpec::centered_cube(8, 1.0);
    let cloud = wide_cloud(&mut r, 3);
    let w = Volume::from_data(grid, (0..grid.len()).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
    let analytic = voxelize_backward(&cloud, &grid, &w);
    check_cloud_grad(&cloud, &analytic, |c| voxelize(c, &grid).dot(&w), "voxel")
}

fn check_image_grad(x: &ProjectionImage, grad: &ProjectionImage, f: impl Fn(&ProjectionImage) -> f64, label: &str) -> Check {
    for p in 0..x.len() {
        let mut g = |v: &[f64]| {
            let mut y = x.clone();
            y.data[p] = v[0];
            f(&y)
        };
        let numeric = central_diff(&mut g, &[x.data[p]], 0, H);
        if !close(grad.data[p], numeric, REL, ABS) {
            return Err(format!("{label}: pixel {p}: analytic {} vs numeric {numeric}", grad.data[p]));
        }
    }
    Ok(())
}

pub fn pixel() -> Check {
    let mut r = rng(4);
    let x = random_image(&mut r, 8, 8);
    let y = random_image(&mut r, 8, 8);
    let (_, g) = pixel_l1(&x, &y).unwrap();
    check_image_grad(&x, &g, |z| pixel_l1(z, &y).unwrap().0, "pixel")
}

pub fn fourier() -> Check {
    let mut r = rng(5);
    for (nu, nv) in [(8, 8), (7, 6)] {
        let x = random_image(&mut r, nu, nv);
        let y = random_image(&mut r, nu, nv);
        let (_, g) = fourier_amplitude(&x, &y, 1.0).unwrap();
        check_image_grad(&x, &g, |z| fourier_amplitude(z, &y, 1.0).unwrap().0, "fourier")?;
    }
    Ok(())
}

/// The 11×11 window needs images at least that large.
pub fn ssim() -> Check {
    let mut r = rng(6);
    let x = random_image(&mut r, 16, 16);
    let y = random_image(&mut r, 16, 16);
    let (_, g) = ssim_loss(&x, &y, 2.0).unwrap();
    check_image_grad(&x, &g, |z| ssim_loss(z, &y, 2.0).unwrap().0, "ssim")
}

pub fn tv() -> Check {
    let mut r = rng(7);
    let grid = GridSpec::centered(8, 7, 6, 1.0);
    let v = Volume::from_data(grid, (0..grid.len()).map(|_| r.gen_range(0.0..2.0)).collect()).unwrap();
    for mode in [TvMode::Axial3, TvMode::Neighbor8] {
        let (_, g) = tv3d(&v, mode).unwrap();
        for p in 0..grid.len() {
            let mut f = |x: &[f64]| {
                let mut w = v.clone();
                w.data[p] = x[0];
                tv3d(&w, mode).unwrap().0
            };
            let numeric = central_diff(&mut f, &[v.data[p]], 0, H);
            if !close(g.data[p], numeric, REL, ABS) {
                return Err(format!("tv {mode:?} voxel {p}: {} vs {numeric}", g.data[p]));
            }
        }
    }
    Ok(())
}

/// Every case, labelled.
pub fn all() -> Vec<(&'static str, Check)> {
    vec![
        ("splatter parallel", splatter(BeamModel::parallel(), 1)),
        ("splatter cone", splatter(BeamModel::cone(40.0), 2)),
        ("voxelizer", voxelizer()),
        ("pixel L1", pixel()),
        ("Fourier amplitude", fourier()),
        ("SSIM", ssim()),
        ("3D TV", tv()),
    ]
}
