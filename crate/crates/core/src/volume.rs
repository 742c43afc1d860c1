//! Regular voxel grids and 2D projection images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DetectorGrid, TiltGeometry};

/// Voxel grid layout. Voxel `(i, j, k)` is centred at
/// `origin + (index + 0.5) * voxel_size`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub voxel_size: f64,
    pub origin: [f64; 3],
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, nz: usize, voxel_size: f64, origin: [f64; 3]) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::DimensionMismatch(format!("grid must be non-empty, got {nx}x{ny}x{nz}")));
        }
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::Config(format!("voxel_size must be positive, got {voxel_size}")));
        }
        Ok(Self { nx, ny, nz, voxel_size, origin })
    }

    /// Grid of `n³` voxels centred on the world origin.
    pub fn centered_cube(n: usize, voxel_size: f64) -> Self {
        Self::centered(n, n, n, voxel_size)
    }

    pub fn centered(nx: usize, ny: usize, nz: usize, voxel_size: f64) -> Self {
        let half = |n: usize| -0.5 * n as f64 * voxel_size;
        Self { nx, ny, nz, voxel_size, origin: [half(nx), half(ny), half(nz)] }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.nx * (j + self.ny * k)
    }

    #[inline]
    pub fn center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + (i as f64 + 0.5) * self.voxel_size,
            self.origin[1] + (j as f64 + 0.5) * self.voxel_size,
            self.origin[2] + (k as f64 + 0.5) * self.voxel_size,
        ]
    }

    /// Continuous index coordinates of a world point (voxel centres are at
    /// integer values).
    #[inline]
    pub fn to_index(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.voxel_size - 0.5,
            (p[1] - self.origin[1]) / self.voxel_size - 0.5,
            (p[2] - self.origin[2]) / self.voxel_size - 0.5,
        ]
    }

    pub fn extent(&self) -> f64 {
        self.voxel_size * self.nx.max(self.ny).max(self.nz) as f64
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }
}

/// Scalar voxel volume, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: GridSpec,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn zeros(grid: GridSpec) -> Self {
        Self { data: vec![0.0; grid.len()], grid }
    }

    pub fn from_data(grid: GridSpec, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "volume data has {} values, grid needs {}",
                data.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, data })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.grid.index(i, j, k);
        self.data[idx] = v;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self { grid: self.grid, data: self.data.iter().map(|v| v * a).collect() }
    }

    pub fn dot(&self, other: &Volume) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionImage {
    pub nu: usize,
    pub nv: usize,
    /// u fastest.
    pub data: Vec<f64>,
    pub view: usize,
    pub angle_deg: f64,
}

impl ProjectionImage {
    pub fn zeros(nu: usize, nv: usize) -> Self {
        Self { nu, nv, data: vec![0.0; nu * nv], view: 0, angle_deg: 0.0 }
    }

    pub fn for_detector(det: &DetectorGrid, view: usize, angle_deg: f64) -> Self {
        Self { nu: det.nu, nv: det.nv, data: vec![0.0; det.pixel_count()], view, angle_deg }
    }

    pub fn from_data(nu: usize, nv: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != nu * nv {
            return Err(Error::DimensionMismatch(format!(
                "image data has {} values, expected {nu}x{nv}",
                data.len()
            )));
        }
        Ok(Self { nu, nv, data, view: 0, angle_deg: 0.0 })
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[u + self.nu * v]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, x: f64) {
        self.data[u + self.nu * v] = x;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn same_shape(&self, other: &ProjectionImage) -> Result<()> {
        if self.nu != other.nu || self.nv != other.nv {
            return Err(Error::DimensionMismatch(format!(
                "images are {}x{} and {}x{}",
                self.nu, self.nv, other.nu, other.nv
            )));
        }
        Ok(())
    }
}

/// Projection images ordered like the angles of a geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionStack {
    pub images: Vec<ProjectionImage>,
}

impl ProjectionStack {
    pub fn new(images: Vec<ProjectionImage>) -> Result<Self> {
        if let Some(first) = images.first() {
            for img in &images[1..] {
                first.same_shape(img)?;
            }
        }
        Ok(Self { images })
    }

    pub fn zeros(geom: &TiltGeometry) -> Self {
        let det = geom.detector();
        Self {
            images: geom
                .angles_deg()
                .iter()
                .enumerate()
                .map(|(i, &a)| ProjectionImage::for_detector(det, i, a))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn angles_deg(&self) -> Vec<f64> {
        self.images.iter().map(|i| i.angle_deg).collect()
    }

    pub fn max(&self) -> f64 {
        self.images.iter().map(|i| i.max()).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Check that the stack matches a geometry's view count and detector.
    pub fn check_geometry(&self, geom: &TiltGeometry) -> Result<()> {
        if self.len() != geom.n_views() {
            return Err(Error::DimensionMismatch(format!(
                "stack has {} images, geometry has {} angles",
                self.len(),
                geom.n_views()
            )));
        }
        let det = geom.detector();
        for img in &self.images {
            if img.nu != det.nu || img.nv != det.nv {
                return Err(Error::DimensionMismatch(format!(
                    "image {} is {}x{}, detector is {}x{}",
                    img.view, img.nu, img.nv, det.nu, det.nv
                )));
            }
        }
        Ok(())
    }

    /// Images at the given indices, re-labelled 0..n.
    pub fn subset(&self, views: &[usize]) -> Result<Self> {
        let mut out = Vec::with_capacity(views.len());
        for (new_index, &v) in views.iter().enumerate() {
            let mut img = self
                .images
                .get(v)
                .cloned()
                .ok_or_else(|| Error::Domain(format!("view {v} out of range ({} views)", self.len())))?;
            img.view = new_index;
            out.push(img);
        }
        Ok(Self { images: out })
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            images: self
                .images
                .iter()
                .map(|img| ProjectionImage { data: img.data.iter().map(|v| v * a).collect(), ..img.clone() })
                .collect(),
        }
    }

    pub fn dot(&self, other: &ProjectionStack) -> f64 {
        self.images
            .iter()
            .zip(&other.images)
            .map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }
}
