//! Additive Gaussian splatting forward projector and its exact gradients.
//!
//! Each Gaussian contributes `γ·d·exp(-½ Δᵀ Σ₂⁻¹ Δ)` to every pixel centre
//! inside its 3σ ellipse. Contributions are summed, never composited, so the
//! result is independent of Gaussian order.

use rayon::prelude::*;

use crate::dual::NPARAM;
use crate::gaussians::{splat_dual, GaussianCloud, GaussianDual, SplatDual, CUTOFF_SIGMA};
use crate::geometry::{TiltGeometry, ViewFrame};
use crate::volume::{ProjectionImage, ProjectionStack};

const TILE: usize = 16;
const CUTOFF2: f64 = CUTOFF_SIGMA * CUTOFF_SIGMA;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// When false, γ is replaced by 1 (ablation).
    pub use_gamma: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { use_gamma: true }
    }
}

/// Gradients of a scalar objective with respect to every cloud parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudGradients {
    pub d_positions: Vec<[f64; 3]>,
    pub d_log_scales: Vec<[f64; 3]>,
    pub d_rotations: Vec<[f64; 4]>,
    pub d_denza_raw: Vec<f64>,
}

impl CloudGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            d_positions: vec![[0.0; 3]; n],
            d_log_scales: vec![[0.0; 3]; n],
            d_rotations: vec![[0.0; 4]; n],
            d_denza_raw: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.d_denza_raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_denza_raw.is_empty()
    }

    /// Parameter `p` (in the dual layout) of Gaussian `i`.
    pub fn get(&self, i: usize, p: usize) -> f64 {
        match p {
            0..=2 => self.d_positions[i][p],
            3..=5 => self.d_log_scales[i][p - 3],
            6..=9 => self.d_rotations[i][p - 6],
            _ => self.d_denza_raw[i],
        }
    }

    fn add_row(&mut self, i: usize, row: &[f64; NPARAM]) {
        for k in 0..3 {
            self.d_positions[i][k] += row[k];
            self.d_log_scales[i][k] += row[3 + k];
        }
        for k in 0..4 {
            self.d_rotations[i][k] += row[6 + k];
        }
        self.d_denza_raw[i] += row[10];
    }

    pub fn accumulate(&mut self, other: &CloudGradients) {
        for i in 0..self.len() {
            for k in 0..3 {
                self.d_positions[i][k] += other.d_positions[i][k];
                self.d_log_scales[i][k] += other.d_log_scales[i][k];
            }
            for k in 0..4 {
                self.d_rotations[i][k] += other.d_rotations[i][k];
            }
            self.d_denza_raw[i] += other.d_denza_raw[i];
        }
    }

    pub fn all_finite(&self) -> bool {
        self.d_positions.iter().flatten().all(|x| x.is_finite())
            && self.d_log_scales.iter().flatten().all(|x| x.is_finite())
            && self.d_rotations.iter().flatten().all(|x| x.is_finite())
            && self.d_denza_raw.iter().all(|x| x.is_finite())
    }
}

/// Per-Gaussian derivative setup shared by all views of one pass.
pub fn prepare_cloud(cloud: &GaussianCloud) -> Vec<GaussianDual> {
    (0..cloud.len()).into_par_iter().map(|i| GaussianDual::new(cloud, i)).collect()
}

/// Screen footprint of one splat, clipped to the detector.
#[derive(Debug, Clone, Copy)]
struct Footprint {
    u0: usize,
    u1: usize,
    v0: usize,
    v1: usize,
}

#[derive(Debug, Clone)]
pub struct PreparedView {
    frame: ViewFrame,
    view: usize,
    angle_deg: f64,
    splats: Vec<Option<(SplatDual, Footprint)>>,
}

impl PreparedView {
    pub fn new(duals: &[GaussianDual], geom: &TiltGeometry, view: usize, opts: RenderOptions) -> Self {
        let frame = geom.frame(view).expect("view index within geometry");
        let det = frame.detector;
        let splats = duals
            .par_iter()
            .map(|g| {
                let s = splat_dual(g, &frame, opts.use_gamma)?;
                let (ru, rv) = s.radius();
                let (mu, mv) = (s.mean[0].v, s.mean[1].v);
                let lo_u = (mu - ru - 0.5).ceil().max(0.0);
                let hi_u = (mu + ru - 0.5).floor().min(det.nu as f64 - 1.0);
                let lo_v = (mv - rv - 0.5).ceil().max(0.0);
                let hi_v = (mv + rv - 0.5).floor().min(det.nv as f64 - 1.0);
                if !(lo_u <= hi_u && lo_v <= hi_v) {
                    return None;
                }
                Some((
                    s,
                    Footprint { u0: lo_u as usize, u1: hi_u as usize, v0: lo_v as usize, v1: hi_v as usize },
                ))
            })
            .collect();
        Self { frame, view, angle_deg: geom.angles_deg()[view], splats }
    }

    pub fn rasterize(&self) -> ProjectionImage {
        let det = self.frame.detector;
        let (nu, nv) = (det.nu, det.nv);
        let tiles_u = nu.div_ceil(TILE);
        let tiles_v = nv.div_ceil(TILE);
        let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_u * tiles_v];
        for (i, s) in self.splats.iter().enumerate() {
            if let Some((_, fp)) = s {
                for tv in fp.v0 / TILE..=fp.v1 / TILE {
                    for tu in fp.u0 / TILE..=fp.u1 / TILE {
                        bins[tu + tiles_u * tv].push(i as u32);
                    }
                }
            }
        }
        let tiles: Vec<Vec<f64>> = bins
            .par_iter()
            .enumerate()
            .map(|(t, list)| {
                let (tu, tv) = (t % tiles_u, t / tiles_u);
                let (u_base, v_base) = (tu * TILE, tv * TILE);
                let u_end = (u_base + TILE).min(nu);
                let v_end = (v_base + TILE).min(nv);
                let w = u_end - u_base;
                let mut buf = vec![0.0; w * (v_end - v_base)];
                for &gi in list {
                    let (s, fp) = self.splats[gi as usize].as_ref().unwrap();
                    let (a, b, c) = (s.conic[0].v, s.conic[1].v, s.conic[2].v);
                    let amp = s.amplitude.v;
                    let (mu, mv) = (s.mean[0].v, s.mean[1].v);
                    for v in fp.v0.max(v_base)..=fp.v1.min(v_end - 1) {
                        let dv = v as f64 + 0.5 - mv;
                        let row = (v - v_base) * w;
                        for u in fp.u0.max(u_base)..=fp.u1.min(u_end - 1) {
                            let du = u as f64 + 0.5 - mu;
                            let m = a * du * du + 2.0 * b * du * dv + c * dv * dv;
                            if m <= CUTOFF2 {
                                buf[row + u - u_base] += amp * (-0.5 * m).exp();
                            }
                        }
                    }
                }
                buf
            })
            .collect();
        let mut img = ProjectionImage::for_detector(&det, self.view, self.angle_deg);
        for (t, buf) in tiles.iter().enumerate() {
            let (tu, tv) = (t % tiles_u, t / tiles_u);
            let (u_base, v_base) = (tu * TILE, tv * TILE);
            let w = (u_base + TILE).min(nu) - u_base;
            for (r, chunk) in buf.chunks(w).enumerate() {
                let start = u_base + nu * (v_base + r);
                img.data[start..start + w].copy_from_slice(chunk);
            }
        }
        img
    }

    /// Gradients of `Σ_pixels dl_dp · P` with respect to every parameter.
    pub fn backward(&self, dl_dp: &ProjectionImage) -> CloudGradients {
        let nu = self.frame.detector.nu;
        let rows: Vec<Option<[f64; NPARAM]>> = self
            .splats
            .par_iter()
            .map(|s| {
                let (s, fp) = s.as_ref()?;
                let (a, b, c) = (s.conic[0].v, s.conic[1].v, s.conic[2].v);
                let amp = s.amplitude.v;
                let (mu, mv) = (s.mean[0].v, s.mean[1].v);
                // d/d(amplitude, mean_u, mean_v, a, b, c)
                let mut g = [0.0f64; 6];
                for v in fp.v0..=fp.v1 {
                    let dv = v as f64 + 0.5 - mv;
                    for u in fp.u0..=fp.u1 {
                        let r = dl_dp.data[u + nu * v];
                        if r == 0.0 {
                            continue;
                        }
                        let du = u as f64 + 0.5 - mu;
                        let m = a * du * du + 2.0 * b * du * dv + c * dv * dv;
                        if m > CUTOFF2 {
                            continue;
                        }
                        let e = (-0.5 * m).exp();
                        g[0] += r * e;
                        let dm = -0.5 * r * amp * e;
                        g[1] -= dm * 2.0 * (a * du + b * dv);
                        g[2] -= dm * 2.0 * (b * du + c * dv);
                        g[3] += dm * du * du;
                        g[4] += dm * 2.0 * du * dv;
                        g[5] += dm * dv * dv;
                    }
                }
                let q = [&s.amplitude, &s.mean[0], &s.mean[1], &s.conic[0], &s.conic[1], &s.conic[2]];
                let mut row = [0.0; NPARAM];
                for (gk, dk) in g.iter().zip(q) {
                    if *gk != 0.0 {
                        for p in 0..NPARAM {
                            row[p] += gk * dk.d[p];
                        }
                    }
                }
                Some(row)
            })
            .collect();
        let mut out = CloudGradients::zeros(self.splats.len());
        for (i, row) in rows.iter().enumerate() {
            if let Some(row) = row {
                out.add_row(i, row);
            }
        }
        out
    }
}

pub fn render_view(cloud: &GaussianCloud, geom: &TiltGeometry, view: usize) -> ProjectionImage {
    render_view_with(cloud, geom, view, RenderOptions::default())
}

pub fn render_view_with(cloud: &GaussianCloud, geom: &TiltGeometry, view: usize, opts: RenderOptions) -> ProjectionImage {
    PreparedView::new(&prepare_cloud(cloud), geom, view, opts).rasterize()
}

pub fn render_backward(
    cloud: &GaussianCloud,
    geom: &TiltGeometry,
    view: usize,
    dl_dp: &ProjectionImage,
) -> CloudGradients {
    PreparedView::new(&prepare_cloud(cloud), geom, view, RenderOptions::default()).backward(dl_dp)
}

pub fn render_all(cloud: &GaussianCloud, geom: &TiltGeometry) -> ProjectionStack {
    render_all_with(cloud, geom, RenderOptions::default())
}

pub fn render_all_with(cloud: &GaussianCloud, geom: &TiltGeometry, opts: RenderOptions) -> ProjectionStack {
    let duals = prepare_cloud(cloud);
    ProjectionStack {
        images: (0..geom.n_views())
            .map(|v| PreparedView::new(&duals, geom, v, opts).rasterize())
            .collect(),
    }
}
