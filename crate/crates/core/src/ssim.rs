//! Windowed SSIM with its gradient, shared by the loss and the metrics.
//!
//! The 11×11 Gaussian window (σ = 1.5) is applied as a separable "valid"
//! correlation, so the SSIM map is `(nu - 10) × (nv - 10)` and no padding
//! enters the statistics.

use crate::error::{Error, Result};
use crate::volume::ProjectionImage;

pub const WINDOW: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;

fn window_1d() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, x) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *x = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|x| x / s)
}

/// Separable valid correlation of an `nu × nv` field.
fn filter_valid(src: &[f64], nu: usize, nv: usize, w: &[f64; WINDOW]) -> Vec<f64> {
    let ou = nu + 1 - WINDOW;
    let ov = nv + 1 - WINDOW;
    let mut tmp = vec![0.0; ou * nv];
    for v in 0..nv {
        let row = &src[v * nu..(v + 1) * nu];
        for u in 0..ou {
            tmp[u + ou * v] = w.iter().zip(&row[u..u + WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ou * ov];
    for v in 0..ov {
        for (k, wk) in w.iter().enumerate() {
            let src_row = &tmp[(v + k) * ou..(v + k + 1) * ou];
            let dst = &mut out[v * ou..(v + 1) * ou];
            for (d, s) in dst.iter_mut().zip(src_row) {
                *d += wk * s;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatter an output-sized field back to input size.
fn filter_valid_adjoint(g: &[f64], nu: usize, nv: usize, w: &[f64; WINDOW]) -> Vec<f64> {
    let ou = nu + 1 - WINDOW;
    let ov = nv + 1 - WINDOW;
    let mut tmp = vec![0.0; ou * nv];
    for v in 0..ov {
        for (k, wk) in w.iter().enumerate() {
            let src = &g[v * ou..(v + 1) * ou];
            let dst = &mut tmp[(v + k) * ou..(v + k + 1) * ou];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wk * s;
            }
        }
    }
    let mut out = vec![0.0; nu * nv];
    for v in 0..nv {
        for u in 0..ou {
            let t = tmp[u + ou * v];
            if t == 0.0 {
                continue;
            }
            for (k, wk) in w.iter().enumerate() {
                out[u + k + nu * v] += wk * t;
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct SsimResult {
    /// Mean of the SSIM map.
    pub mean: f64,
    pub map: Vec<f64>,
    /// d(mean SSIM)/d(first image), when requested.
    pub grad: Option<Vec<f64>>,
}

fn check(a: &ProjectionImage, b: &ProjectionImage, data_range: f64) -> Result<()> {
    a.same_shape(b)?;
    if !(data_range > 0.0) {
        return Err(Error::Config(format!("data_range must be positive, got {data_range}")));
    }
    if a.nu < WINDOW || a.nv < WINDOW {
        return Err(Error::DimensionMismatch(format!(
            "SSIM needs at least {WINDOW}x{WINDOW} pixels, got {}x{}",
            a.nu, a.nv
        )));
    }
    Ok(())
}

/// SSIM of `x` against `y`, optionally with the gradient of the mean with
/// respect to `x`.
pub fn ssim_with_grad(x: &ProjectionImage, y: &ProjectionImage, data_range: f64, want_grad: bool) -> Result<SsimResult> {
    check(x, y, data_range)?;
    let (nu, nv) = (x.nu, x.nv);
    let w = window_1d();
    let c1 = (K1 * data_range).powi(2);
    let c2 = (K2 * data_range).powi(2);
    let xx: Vec<f64> = x.data.iter().map(|a| a * a).collect();
    let yy: Vec<f64> = y.data.iter().map(|a| a * a).collect();
    let xy: Vec<f64> = x.data.iter().zip(&y.data).map(|(a, b)| a * b).collect();
    let mx = filter_valid(&x.data, nu, nv, &w);
    let my = filter_valid(&y.data, nu, nv, &w);
    let exx = filter_valid(&xx, nu, nv, &w);
    let eyy = filter_valid(&yy, nu, nv, &w);
    let exy = filter_valid(&xy, nu, nv, &w);
    let n = mx.len();
    let mut map = vec![0.0; n];
    let mut g_mu = vec![0.0; if want_grad { n } else { 0 }];
    let mut g_xx = g_mu.clone();
    let mut g_xy = g_mu.clone();
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let sxx = exx[i] - ux * ux;
        let syy = eyy[i] - uy * uy;
        let sxy = exy[i] - ux * uy;
        let a1 = 2.0 * ux * uy + c1;
        let a2 = 2.0 * sxy + c2;
        let b1 = ux * ux + uy * uy + c1;
        let b2 = sxx + syy + c2;
        let s = a1 * a2 / (b1 * b2);
        map[i] = s;
        if want_grad {
            let inv = 1.0 / (b1 * b2 * n as f64);
            g_mu[i] = (2.0 * uy * a2 - 2.0 * uy * a1) * inv - s / n as f64 * (2.0 * ux / b1 - 2.0 * ux / b2);
            g_xx[i] = -s / (b2 * n as f64);
            g_xy[i] = 2.0 * a1 * inv;
        }
    }
    let mean = map.iter().sum::<f64>() / n as f64;
    let grad = want_grad.then(|| {
        let d_mu = filter_valid_adjoint(&g_mu, nu, nv, &w);
        let d_xx = filter_valid_adjoint(&g_xx, nu, nv, &w);
        let d_xy = filter_valid_adjoint(&g_xy, nu, nv, &w);
        (0..nu * nv)
            .map(|p| d_mu[p] + 2.0 * x.data[p] * d_xx[p] + y.data[p] * d_xy[p])
            .collect()
    });
    Ok(SsimResult { mean, map, grad })
}

pub fn ssim(a: &ProjectionImage, b: &ProjectionImage, data_range: f64) -> Result<f64> {
    Ok(ssim_with_grad(a, b, data_range, false)?.mean)
}
