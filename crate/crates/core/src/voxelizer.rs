//! Sampling the Gaussian mixture on a voxel grid, with gradients.

use rayon::prelude::*;

use crate::dual::{inv_sym3, Dual, NPARAM};
use crate::gaussians::{GaussianCloud, GaussianDual, CUTOFF_SIGMA};
use crate::splatter::{prepare_cloud, CloudGradients};
use crate::volume::{GridSpec, Volume};

const SLAB: usize = 4;

/// Per-Gaussian voxel-space quantities: denza, mean, precision matrix and
/// the clipped index box of the truncated support.
#[derive(Debug, Clone, Copy)]
struct Blob {
    denza: Dual,
    mean: [Dual; 3],
    /// Unique precision entries p00, p01, p02, p11, p12, p22.
    prec: [Dual; 6],
    lo: [usize; 3],
    hi: [usize; 3],
}

impl Blob {
    fn new(g: &GaussianDual, grid: &GridSpec, cutoff: f64) -> Option<Self> {
        let p = inv_sym3(&g.sigma);
        let prec = [p[0][0], p[0][1], p[0][2], p[1][1], p[1][2], p[2][2]];
        let dims = grid.dims();
        let mut lo = [0; 3];
        let mut hi = [0; 3];
        for a in 0..3 {
            let r = cutoff * g.sigma[a][a].v.sqrt();
            let c = (g.position[a].v - grid.origin[a]) / grid.voxel_size - 0.5;
            let r = r / grid.voxel_size;
            let l = (c - r).ceil().max(0.0);
            let h = (c + r).floor().min(dims[a] as f64 - 1.0);
            if !(l <= h) {
                return None;
            }
            lo[a] = l as usize;
            hi[a] = h as usize;
        }
        Some(Self { denza: g.denza, mean: g.position, prec, lo, hi })
    }

    #[inline]
    fn mahalanobis(&self, d: [f64; 3]) -> f64 {
        let p = &self.prec;
        p[0].v * d[0] * d[0]
            + p[3].v * d[1] * d[1]
            + p[5].v * d[2] * d[2]
            + 2.0 * (p[1].v * d[0] * d[1] + p[2].v * d[0] * d[2] + p[4].v * d[1] * d[2])
    }
}

/// Volume evaluator caching the per-Gaussian setup so a forward and backward
/// pass share it.
pub struct PreparedVolume {
    grid: GridSpec,
    blobs: Vec<Option<Blob>>,
    cutoff2: f64,
}

impl PreparedVolume {
    pub fn new(duals: &[GaussianDual], grid: &GridSpec) -> Self {
        Self::with_cutoff(duals, grid, CUTOFF_SIGMA)
    }

    pub fn with_cutoff(duals: &[GaussianDual], grid: &GridSpec, cutoff: f64) -> Self {
        Self {
            grid: *grid,
            blobs: duals.par_iter().map(|g| Blob::new(g, grid, cutoff)).collect(),
            cutoff2: cutoff * cutoff,
        }
    }

    fn offset(&self, b: &Blob, i: usize, j: usize, k: usize) -> [f64; 3] {
        let c = self.grid.center(i, j, k);
        [c[0] - b.mean[0].v, c[1] - b.mean[1].v, c[2] - b.mean[2].v]
    }

    pub fn forward(&self) -> Volume {
        let g = self.grid;
        let n_slabs = g.nz.div_ceil(SLAB);
        let mut bins: Vec<Vec<u32>> = vec![Vec::new(); n_slabs];
        for (idx, b) in self.blobs.iter().enumerate() {
            if let Some(b) = b {
                for s in b.lo[2] / SLAB..=b.hi[2] / SLAB {
                    bins[s].push(idx as u32);
                }
            }
        }
        let slabs: Vec<Vec<f64>> = bins
            .par_iter()
            .enumerate()
            .map(|(s, list)| {
                let k0 = s * SLAB;
                let k1 = (k0 + SLAB).min(g.nz);
                let plane = g.nx * g.ny;
                let mut buf = vec![0.0; plane * (k1 - k0)];
                for &bi in list {
                    let b = self.blobs[bi as usize].as_ref().unwrap();
                    let amp = b.denza.v;
                    for k in b.lo[2].max(k0)..=b.hi[2].min(k1 - 1) {
                        for j in b.lo[1]..=b.hi[1] {
                            for i in b.lo[0]..=b.hi[0] {
                                let m = b.mahalanobis(self.offset(b, i, j, k));
                                if m <= self.cutoff2 {
                                    buf[i + g.nx * j + plane * (k - k0)] += amp * (-0.5 * m).exp();
                                }
                            }
                        }
                    }
                }
                buf
            })
            .collect();
        Volume { grid: g, data: slabs.concat() }
    }

    /// Gradients of `Σ_voxels dl_dv · V` with respect to the cloud.
    pub fn backward(&self, dl_dv: &Volume) -> CloudGradients {
        let g = self.grid;
        let rows: Vec<Option<[f64; NPARAM]>> = self
            .blobs
            .par_iter()
            .map(|b| {
                let b = b.as_ref()?;
                let amp = b.denza.v;
                let p = &b.prec;
                // d/d(denza, mean xyz, p00, p01, p02, p11, p12, p22)
                let mut acc = [0.0f64; 10];
                for k in b.lo[2]..=b.hi[2] {
                    for j in b.lo[1]..=b.hi[1] {
                        for i in b.lo[0]..=b.hi[0] {
                            let r = dl_dv.data[g.index(i, j, k)];
                            if r == 0.0 {
                                continue;
                            }
                            let d = self.offset(b, i, j, k);
                            let m = b.mahalanobis(d);
                            if m > self.cutoff2 {
                                continue;
                            }
                            let e = (-0.5 * m).exp();
                            acc[0] += r * e;
                            let dm = -0.5 * r * amp * e;
                            let pd = [
                                p[0].v * d[0] + p[1].v * d[1] + p[2].v * d[2],
                                p[1].v * d[0] + p[3].v * d[1] + p[4].v * d[2],
                                p[2].v * d[0] + p[4].v * d[1] + p[5].v * d[2],
                            ];
                            for a in 0..3 {
                                acc[1 + a] -= 2.0 * dm * pd[a];
                            }
                            acc[4] += dm * d[0] * d[0];
                            acc[5] += dm * 2.0 * d[0] * d[1];
                            acc[6] += dm * 2.0 * d[0] * d[2];
                            acc[7] += dm * d[1] * d[1];
                            acc[8] += dm * 2.0 * d[1] * d[2];
                            acc[9] += dm * d[2] * d[2];
                        }
                    }
                }
                let q = [&b.denza, &b.mean[0], &b.mean[1], &b.mean[2], &p[0], &p[1], &p[2], &p[3], &p[4], &p[5]];
                let mut row = [0.0; NPARAM];
                for (gk, dk) in acc.iter().zip(q) {
                    if *gk != 0.0 {
                        for (r, d) in row.iter_mut().zip(&dk.d) {
                            *r += gk * d;
                        }
                    }
                }
                Some(row)
            })
            .collect();
        let mut out = CloudGradients::zeros(self.blobs.len());
        for (i, row) in rows.iter().enumerate() {
            if let Some(row) = row {
                for k in 0..3 {
                    out.d_positions[i][k] += row[k];
                    out.d_log_scales[i][k] += row[3 + k];
                }
                for k in 0..4 {
                    out.d_rotations[i][k] += row[6 + k];
                }
                out.d_denza_raw[i] += row[10];
            }
        }
        out
    }
}

pub fn voxelize(cloud: &GaussianCloud, grid: &GridSpec) -> Volume {
    PreparedVolume::new(&prepare_cloud(cloud), grid).forward()
}

/// Voxelization with a custom Mahalanobis cutoff radius.
pub fn voxelize_with_cutoff(cloud: &GaussianCloud, grid: &GridSpec, cutoff: f64) -> Volume {
    PreparedVolume::with_cutoff(&prepare_cloud(cloud), grid, cutoff).forward()
}

pub fn voxelize_backward(cloud: &GaussianCloud, grid: &GridSpec, dl_dv: &Volume) -> CloudGradients {
    PreparedVolume::new(&prepare_cloud(cloud), grid).backward(dl_dv)
}
