//! Data and regularisation terms of the training objective, each returning
//! its value and gradient.

use std::f64::consts::SQRT_2;

use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssim;
use crate::volume::{ProjectionImage, Volume};

/// Smoothing width of `|·|` in gradients; reported values are exact L1.
pub const HUBER_DELTA: f64 = 1e-6;

#[inline]
fn smooth_sign(x: f64) -> f64 {
    (x / HUBER_DELTA).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_pixel: f64,
    pub lambda_freq: f64,
    pub lambda_ssim: f64,
    pub lambda_3dtv: f64,
    /// High-frequency emphasis inside the Fourier term.
    pub lambda_hf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_pixel: 1.0, lambda_freq: 0.1, lambda_ssim: 0.2, lambda_3dtv: 0.01, lambda_hf: 1.0 }
    }
}

impl LossWeights {
    pub fn pixel_only() -> Self {
        Self { lambda_pixel: 1.0, lambda_freq: 0.0, lambda_ssim: 0.0, lambda_3dtv: 0.0, lambda_hf: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_pixel, self.lambda_freq, self.lambda_ssim, self.lambda_3dtv, self.lambda_hf];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        if self.lambda_pixel + self.lambda_freq + self.lambda_ssim <= 0.0 {
            return Err(Error::Config("at least one data-term weight must be positive".into()));
        }
        Ok(())
    }
}

/// Mean absolute difference and its gradient with respect to `render`.
pub fn pixel_l1(render: &ProjectionImage, meas: &ProjectionImage) -> Result<(f64, ProjectionImage)> {
    render.same_shape(meas)?;
    let n = render.len() as f64;
    let mut grad = render.clone();
    let mut sum = 0.0;
    for ((g, r), m) in grad.data.iter_mut().zip(&render.data).zip(&meas.data) {
        let d = r - m;
        sum += d.abs();
        *g = smooth_sign(d) / n;
    }
    Ok((sum / n, grad))
}

fn signed_freq(k: usize, n: usize) -> f64 {
    let k = k as i64;
    let n = n as i64;
    let f = if k <= n / 2 { k } else { k - n };
    f as f64 / (n as f64 / 2.0)
}

/// Normalised radial frequency of every DFT bin, in `[0, 1]`.
pub fn radial_weight(nu: usize, nv: usize) -> Vec<f64> {
    let mut w = Vec::with_capacity(nu * nv);
    for kv in 0..nv {
        let fv = signed_freq(kv, nv);
        for ku in 0..nu {
            let fu = signed_freq(ku, nu);
            w.push(((fu * fu + fv * fv).sqrt() / SQRT_2).min(1.0));
        }
    }
    w
}

fn fft2(data: &[f64], nu: usize, nv: usize, inverse: bool, planner: &mut FftPlanner<f64>) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = data.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft2_inplace(&mut buf, nu, nv, inverse, planner);
    buf
}

fn fft2_inplace(buf: &mut [Complex64], nu: usize, nv: usize, inverse: bool, planner: &mut FftPlanner<f64>) {
    let (pu, pv) = if inverse {
        (planner.plan_fft_inverse(nu), planner.plan_fft_inverse(nv))
    } else {
        (planner.plan_fft_forward(nu), planner.plan_fft_forward(nv))
    };
    pu.process(buf);
    let mut col = vec![Complex64::new(0.0, 0.0); nv];
    for u in 0..nu {
        for v in 0..nv {
            col[v] = buf[u + nu * v];
        }
        pv.process(&mut col);
        for v in 0..nv {
            buf[u + nu * v] = col[v];
        }
    }
}

/// Weighted mean absolute difference of the amplitude spectra, with the
/// gradient with respect to `render`.
pub fn fourier_amplitude(render: &ProjectionImage, meas: &ProjectionImage, lambda_hf: f64) -> Result<(f64, ProjectionImage)> {
    render.same_shape(meas)?;
    let (nu, nv) = (render.nu, render.nv);
    if nu < 2 || nv < 2 {
        return Err(Error::DimensionMismatch(format!("Fourier loss needs at least 2x2 pixels, got {nu}x{nv}")));
    }
    let mut planner = FftPlanner::new();
    let fr = fft2(&render.data, nu, nv, false, &mut planner);
    let fm = fft2(&meas.data, nu, nv, false, &mut planner);
    let w = radial_weight(nu, nv);
    let n = (nu * nv) as f64;
    let mut value = 0.0;
    let mut back: Vec<Complex64> = Vec::with_capacity(nu * nv);
    for k in 0..nu * nv {
        let c = 1.0 + lambda_hf * w[k];
        let ar = fr[k].norm();
        let am = fm[k].norm();
        let d = ar - am;
        value += c * d.abs();
        let s = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        let g = c * s / n;
        back.push(if ar < 1e-12 { Complex64::new(0.0, 0.0) } else { fr[k] * (g / ar) });
    }
    fft2_inplace(&mut back, nu, nv, true, &mut planner);
    let mut grad = render.clone();
    for (g, b) in grad.data.iter_mut().zip(&back) {
        *g = b.re;
    }
    Ok((value / n, grad))
}

/// `1 − SSIM` and its gradient with respect to `render`.
pub fn ssim_loss(render: &ProjectionImage, meas: &ProjectionImage, data_range: f64) -> Result<(f64, ProjectionImage)> {
    let r = ssim::ssim_with_grad(render, meas, data_range, true)?;
    let mut grad = render.clone();
    for (g, d) in grad.data.iter_mut().zip(r.grad.unwrap()) {
        *g = -d;
    }
    Ok((1.0 - r.mean, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TvMode {
    /// Forward differences along x, y and z.
    #[default]
    Axial3,
    /// Axial differences plus the two in-slice diagonals, weighted 1/√2.
    Neighbor8,
}

impl std::str::FromStr for TvMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "axial3" => Ok(Self::Axial3),
            "neighbor8" => Ok(Self::Neighbor8),
            _ => Err(Error::Config(format!("unknown TV mode {s:?} (expected axial3 or neighbor8)"))),
        }
    }
}

/// Anisotropic 3D total variation normalised by voxel count.
pub fn tv3d(vol: &Volume, mode: TvMode) -> Result<(f64, Volume)> {
    let g = vol.grid;
    if g.len() < 2 {
        return Err(Error::DimensionMismatch(format!("TV needs at least two voxels, got {}x{}x{}", g.nx, g.ny, g.nz)));
    }
    let diag = 1.0 / SQRT_2;
    // (dx, dy, dz, weight); dy may be negative for the anti-diagonal.
    let mut offsets: Vec<(usize, isize, usize, f64)> = vec![(1, 0, 0, 1.0), (0, 1, 0, 1.0), (0, 0, 1, 1.0)];
    if mode == TvMode::Neighbor8 {
        offsets.push((1, 1, 0, diag));
        offsets.push((1, -1, 0, diag));
    }
    let n = g.len() as f64;
    let mut grad = Volume::zeros(g);
    let mut value = 0.0;
    for k in 0..g.nz {
        for j in 0..g.ny {
            for i in 0..g.nx {
                let a = g.index(i, j, k);
                for &(dx, dy, dz, wgt) in &offsets {
                    let (ii, kk) = (i + dx, k + dz);
                    let jj = j as isize + dy;
                    if ii >= g.nx || kk >= g.nz || jj < 0 || jj as usize >= g.ny {
                        continue;
                    }
                    let b = g.index(ii, jj as usize, kk);
                    let d = vol.data[b] - vol.data[a];
                    value += wgt * d.abs();
                    let s = wgt * smooth_sign(d) / n;
                    grad.data[b] += s;
                    grad.data[a] -= s;
                }
            }
        }
    }
    Ok((value / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    /// SSIM dynamic range, normally the maximum of the measured stack.
    pub data_range: f64,
    pub tv_mode: TvMode,
}

#[derive(Debug, Clone)]
pub struct LossReport {
    pub pixel: f64,
    pub freq: f64,
    pub ssim: f64,
    pub tv3d: f64,
    pub total: f64,
    /// dTotal/dRender, one image per view.
    pub grad_images: Vec<ProjectionImage>,
    /// dTotal/dVoxel, when a volume was supplied.
    pub grad_volume: Option<Volume>,
}

/// Weighted objective over all views plus the volume regulariser. Terms with
/// zero weight are still evaluated so that the report is complete; pass
/// `None` for the volume to skip TV entirely.
pub fn total_loss(
    renders: &[ProjectionImage],
    meas: &[ProjectionImage],
    volume: Option<&Volume>,
    weights: &LossWeights,
    opts: &LossOptions,
) -> Result<LossReport> {
    weights.validate()?;
    if renders.len() != meas.len() || renders.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} renders vs {} measurements",
            renders.len(),
            meas.len()
        )));
    }
    let nviews = renders.len() as f64;
    let (mut pixel, mut freq, mut ssim_term) = (0.0, 0.0, 0.0);
    let mut grads = Vec::with_capacity(renders.len());
    for (r, m) in renders.iter().zip(meas) {
        let (pv, pg) = pixel_l1(r, m)?;
        let (fv, fg) = fourier_amplitude(r, m, weights.lambda_hf)?;
        let (sv, sg) = if r.nu >= ssim::WINDOW && r.nv >= ssim::WINDOW {
            ssim_loss(r, m, opts.data_range)?
        } else if weights.lambda_ssim > 0.0 {
            return Err(Error::DimensionMismatch(format!(
                "SSIM term needs at least {0}x{0} pixels, got {1}x{2}",
                ssim::WINDOW,
                r.nu,
                r.nv
            )));
        } else {
            (0.0, ProjectionImage { data: vec![0.0; r.len()], ..r.clone() })
        };
        pixel += pv;
        freq += fv;
        ssim_term += sv;
        let mut g = pg;
        for ((gi, fi), si) in g.data.iter_mut().zip(&fg.data).zip(&sg.data) {
            *gi = (weights.lambda_pixel * *gi + weights.lambda_freq * fi + weights.lambda_ssim * si) / nviews;
        }
        grads.push(g);
    }
    pixel /= nviews;
    freq /= nviews;
    ssim_term /= nviews;
    let (tv, grad_volume) = match volume {
        Some(v) => {
            let (tv, mut gv) = tv3d(v, opts.tv_mode)?;
            gv.data.iter_mut().for_each(|x| *x *= weights.lambda_3dtv);
            (tv, Some(gv))
        }
        None => (0.0, None),
    };
    let total = weights.lambda_pixel * pixel + weights.lambda_freq * freq + weights.lambda_ssim * ssim_term + weights.lambda_3dtv * tv;
    Ok(LossReport { pixel, freq, ssim: ssim_term, tv3d: tv, total, grad_images: grads, grad_volume })
}
