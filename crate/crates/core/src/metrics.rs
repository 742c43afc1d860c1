//! PSNR and SSIM in the projection and volume domains.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classical::project_volume;
use crate::error::{Error, Result};
use crate::gaussians::GaussianCloud;
use crate::geometry::TiltGeometry;
use crate::losses::{tv3d, TvMode};
use crate::splatter::{render_view_with, RenderOptions};
use crate::ssim;
use crate::synthdata::ViewSplit;
use crate::volume::{ProjectionImage, ProjectionStack, Volume};
use crate::voxelizer::voxelize;

/// Reported for exact matches instead of infinity.
pub const PSNR_CAP: f64 = 99.0;

pub fn psnr(a: &[f64], b: &[f64], data_range: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} values", a.len(), b.len())));
    }
    if !(data_range > 0.0) {
        return Err(Error::Config(format!("data_range must be positive, got {data_range}")));
    }
    if a.is_empty() {
        return Err(Error::DimensionMismatch("PSNR of empty inputs".into()));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP))
}

pub fn psnr_image(a: &ProjectionImage, b: &ProjectionImage, data_range: f64) -> Result<f64> {
    a.same_shape(b)?;
    psnr(&a.data, &b.data, data_range)
}

pub fn psnr_volume(a: &Volume, b: &Volume, data_range: f64) -> Result<f64> {
    if a.grid.dims() != b.grid.dims() {
        return Err(Error::DimensionMismatch(format!("volume dims {:?} vs {:?}", a.grid.dims(), b.grid.dims())));
    }
    psnr(&a.data, &b.data, data_range)
}

pub fn ssim(a: &ProjectionImage, b: &ProjectionImage, data_range: f64) -> Result<f64> {
    ssim::ssim(a, b, data_range)
}

/// Slice `k` of `vol` perpendicular to `axis`, as an image.
pub fn volume_slice(vol: &Volume, axis: usize, k: usize) -> ProjectionImage {
    let g = vol.grid;
    let (nu, nv) = match axis {
        0 => (g.ny, g.nz),
        1 => (g.nx, g.nz),
        _ => (g.nx, g.ny),
    };
    let mut data = Vec::with_capacity(nu * nv);
    for b in 0..nv {
        for a in 0..nu {
            data.push(match axis {
                0 => vol.get(k, a, b),
                1 => vol.get(a, k, b),
                _ => vol.get(a, b, k),
            });
        }
    }
    ProjectionImage::from_data(nu, nv, data).expect("slice dims")
}

/// Mean SSIM over every slice along all three axes.
pub fn volume_ssim(a: &Volume, b: &Volume, data_range: f64) -> Result<f64> {
    let dims = a.grid.dims();
    if dims != b.grid.dims() {
        return Err(Error::DimensionMismatch(format!("volume dims {dims:?} vs {:?}", b.grid.dims())));
    }
    if dims.iter().any(|&d| d < ssim::WINDOW) {
        return Err(Error::DimensionMismatch(format!("volume SSIM needs every dimension ≥ {}, got {dims:?}", ssim::WINDOW)));
    }
    let jobs: Vec<(usize, usize)> = (0..3).flat_map(|axis| (0..dims[axis]).map(move |k| (axis, k))).collect();
    let scores: Vec<f64> = jobs
        .par_iter()
        .map(|&(axis, k)| ssim::ssim(&volume_slice(a, axis, k), &volume_slice(b, axis, k), data_range))
        .collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// What is being evaluated: a cloud (rendered) or a volume (reprojected).
#[derive(Clone, Copy)]
pub enum Reconstruction<'a> {
    Cloud(&'a GaussianCloud, RenderOptions),
    Volume(&'a Volume),
}

impl Reconstruction<'_> {
    pub fn project(&self, geom: &TiltGeometry, view: usize) -> ProjectionImage {
        match self {
            Reconstruction::Cloud(c, opts) => render_view_with(c, geom, view, *opts),
            Reconstruction::Volume(v) => project_volume(v, geom, view),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub split: String,
    pub n_views: usize,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Projection-domain range: the maximum of the reference stack.
    pub data_range: f64,
    pub volume_data_range: Option<f64>,
    pub rows: Vec<ReportRow>,
    pub train_views: Vec<ViewScore>,
    pub test_views: Vec<ViewScore>,
}

impl EvalReport {
    pub fn row(&self, split: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.split == split)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# data_range={:e}", self.data_range)?;
        if let Some(r) = self.volume_data_range {
            writeln!(w, "# volume_data_range={r:e}")?;
        }
        writeln!(w, "split,n_views,psnr_mean,ssim_mean")?;
        for r in &self.rows {
            writeln!(w, "{},{},{:.6},{:.6}", r.split, r.n_views, r.psnr_mean, r.ssim_mean)?;
        }
        Ok(())
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "data range {:.4}", self.data_range);
        let _ = writeln!(s, "{:<8} {:>7} {:>10} {:>8}", "split", "views", "PSNR (dB)", "SSIM");
        for r in &self.rows {
            let _ = writeln!(s, "{:<8} {:>7} {:>10.3} {:>8.4}", r.split, r.n_views, r.psnr_mean, r.ssim_mean);
        }
        s
    }
}

fn score_views(rec: &Reconstruction, stack: &ProjectionStack, geom: &TiltGeometry, views: &[usize], range: f64) -> Result<Vec<ViewScore>> {
    views
        .par_iter()
        .map(|&v| {
            let reference = stack
                .images
                .get(v)
                .ok_or_else(|| Error::Config(format!("view {v} missing from a stack of {}", stack.len())))?;
            let img = rec.project(geom, v);
            Ok(ViewScore { view: v, psnr: psnr_image(&img, reference, range)?, ssim: ssim(&img, reference, range)? })
        })
        .collect()
}

fn row(split: &str, scores: &[ViewScore]) -> ReportRow {
    let n = scores.len().max(1) as f64;
    ReportRow {
        split: split.into(),
        n_views: scores.len(),
        psnr_mean: scores.iter().map(|s| s.psnr).sum::<f64>() / n,
        ssim_mean: scores.iter().map(|s| s.ssim).sum::<f64>() / n,
    }
}

/// Score a reconstruction against the reference stack on the train and test
/// views, and against a ground-truth volume when one is given.
pub fn evaluate_run(
    rec: Reconstruction,
    stack: &ProjectionStack,
    geom: &TiltGeometry,
    split: &ViewSplit,
    gt_volume: Option<&Volume>,
) -> Result<EvalReport> {
    stack.check_geometry(geom)?;
    let range = stack.max();
    let train_views = score_views(&rec, stack, geom, &split.train, range)?;
    let test_views = score_views(&rec, stack, geom, &split.test, range)?;
    let mut rows = vec![row("train", &train_views), row("test", &test_views)];
    let mut volume_data_range = None;
    if let Some(gt) = gt_volume {
        let vol = match rec {
            Reconstruction::Cloud(c, _) => voxelize(c, &gt.grid),
            Reconstruction::Volume(v) => v.clone(),
        };
        let vr = gt.max();
        rows.push(ReportRow {
            split: "volume".into(),
            n_views: 0,
            psnr_mean: psnr_volume(&vol, gt, vr)?,
            ssim_mean: volume_ssim(&vol, gt, vr)?,
        });
        volume_data_range = Some(vr);
    }
    Ok(EvalReport { data_range: range, volume_data_range, rows, train_views, test_views })
}

/// Total variation of `recon - gt`, an artifact proxy: streaks and speckle in
/// the error raise it while a smooth residual keeps it low.
pub fn tv_of_error(recon: &Volume, gt: &Volume) -> Result<f64> {
    if recon.grid.dims() != gt.grid.dims() {
        return Err(Error::DimensionMismatch(format!("volume {:?} vs {:?}", recon.grid.dims(), gt.grid.dims())));
    }
    let diff = Volume::from_data(gt.grid, recon.data.iter().zip(&gt.data).map(|(a, b)| a - b).collect())?;
    Ok(tv3d(&diff, TvMode::Axial3)?.0)
}
