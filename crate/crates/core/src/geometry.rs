//! Tilt-series acquisition geometry.
//!
//! The specimen rotates about the world `y` axis, which is also the detector
//! `v` axis. At 0° the beam travels along world `+z` and detector `u` runs
//! along world `x`. Detector pixel `i` spans `[i, i + 1)` in pixel
//! coordinates, so its center sits at `i + 0.5`; the detector center maps to
//! the projection of the world origin.
//!
//! For the cone model the source sits `source_distance` before the rotation
//! axis and the detector is a virtual plane through the rotation axis, so
//! pixel units equal world units at the isocenter and the parallel model is
//! the limit of an infinitely distant source.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorGrid {
    pub nu: usize,
    pub nv: usize,
    pub pixel_size: f64,
}

impl DetectorGrid {
    pub fn new(nu: usize, nv: usize, pixel_size: f64) -> Result<Self> {
        if nu == 0 || nv == 0 {
            return Err(Error::Geometry(format!("detector must be non-empty, got {nu}x{nv}")));
        }
        if !(pixel_size > 0.0 && pixel_size.is_finite()) {
            return Err(Error::Geometry(format!("pixel_size must be positive, got {pixel_size}")));
        }
        Ok(Self { nu, nv, pixel_size })
    }

    pub fn square(n: usize) -> Self {
        Self { nu: n, nv: n, pixel_size: 1.0 }
    }

    pub fn pixel_count(&self) -> usize {
        self.nu * self.nv
    }

    /// Largest distance from the detector center to its edge, in world units.
    pub fn half_extent(&self) -> f64 {
        0.5 * self.pixel_size * self.nu.max(self.nv) as f64
    }

    /// World-frame lateral offset of a (continuous) pixel coordinate.
    #[inline]
    pub fn pixel_to_plane(&self, u: f64, v: f64) -> (f64, f64) {
        (
            (u - 0.5 * self.nu as f64) * self.pixel_size,
            (v - 0.5 * self.nv as f64) * self.pixel_size,
        )
    }

    #[inline]
    pub fn plane_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        (
            x / self.pixel_size + 0.5 * self.nu as f64,
            y / self.pixel_size + 0.5 * self.nv as f64,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BeamKind {
    Parallel,
    Cone,
}

impl std::str::FromStr for BeamKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "parallel" => Ok(Self::Parallel),
            "cone" => Ok(Self::Cone),
            _ => Err(Error::Config(format!("unknown beam {s:?} (expected parallel or cone)"))),
        }
    }
}

/// Probe description. The convergence angle and probe size are carried for
/// bookkeeping; the forward model treats the probe as a point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamModel {
    pub kind: BeamKind,
    pub source_distance: f64,
    pub convergence_angle_deg: f64,
    pub probe_sigma: f64,
}

impl BeamModel {
    pub fn parallel() -> Self {
        Self {
            kind: BeamKind::Parallel,
            source_distance: f64::INFINITY,
            convergence_angle_deg: 0.0,
            probe_sigma: 0.0,
        }
    }

    pub fn cone(source_distance: f64) -> Self {
        Self {
            kind: BeamKind::Cone,
            source_distance,
            convergence_angle_deg: 0.0,
            probe_sigma: 0.0,
        }
    }

    pub fn is_cone(&self) -> bool {
        self.kind == BeamKind::Cone
    }
}

impl Default for BeamModel {
    fn default() -> Self {
        Self::parallel()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// Rotation taking world coordinates into the frame of a view tilted by
/// `angle_deg` about the `v` axis. The third row is the beam direction.
pub fn view_rotation(angle_deg: f64) -> Matrix3<f64> {
    let (s, c) = angle_deg.to_radians().sin_cos();
    Matrix3::new(
        c, 0.0, s, //
        0.0, 1.0, 0.0, //
        -s, 0.0, c,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiltGeometry {
    angles_deg: Vec<f64>,
    detector: DetectorGrid,
    beam: BeamModel,
}

impl TiltGeometry {
    pub fn new(angles_deg: Vec<f64>, detector: DetectorGrid, beam: BeamModel) -> Result<Self> {
        DetectorGrid::new(detector.nu, detector.nv, detector.pixel_size)?;
        for (i, a) in angles_deg.iter().enumerate() {
            if !a.is_finite() || a.abs() >= 90.0 {
                return Err(Error::Geometry(format!("angle {i} = {a} outside (-90, 90)")));
            }
        }
        if angles_deg.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Geometry("angles must be strictly increasing".into()));
        }
        if beam.is_cone() && !(beam.source_distance > detector.half_extent()) {
            return Err(Error::Geometry(format!(
                "cone source_distance {} must exceed detector half extent {}",
                beam.source_distance,
                detector.half_extent()
            )));
        }
        Ok(Self { angles_deg, detector, beam })
    }

    /// Parallel-beam geometry with evenly spaced angles over `[-max, max]`.
    pub fn uniform_parallel(n_views: usize, max_angle_deg: f64, detector: DetectorGrid) -> Result<Self> {
        Self::new(uniform_angles(n_views, max_angle_deg), detector, BeamModel::parallel())
    }

    pub fn angles_deg(&self) -> &[f64] {
        &self.angles_deg
    }

    pub fn n_views(&self) -> usize {
        self.angles_deg.len()
    }

    pub fn detector(&self) -> &DetectorGrid {
        &self.detector
    }

    pub fn beam(&self) -> &BeamModel {
        &self.beam
    }

    /// Geometry restricted to the given views, in the given order.
    pub fn subset(&self, views: &[usize]) -> Result<Self> {
        let mut angles = Vec::with_capacity(views.len());
        for &v in views {
            angles.push(*self.angles_deg.get(v).ok_or_else(|| {
                Error::Domain(format!("view {v} out of range ({} views)", self.n_views()))
            })?);
        }
        Self::new(angles, self.detector, self.beam)
    }

    pub fn with_beam(&self, beam: BeamModel) -> Result<Self> {
        Self::new(self.angles_deg.clone(), self.detector, beam)
    }

    pub fn frame(&self, view: usize) -> Result<ViewFrame> {
        let angle = *self
            .angles_deg
            .get(view)
            .ok_or_else(|| Error::Domain(format!("view {view} out of range ({} views)", self.n_views())))?;
        Ok(ViewFrame {
            rotation: view_rotation(angle),
            detector: self.detector,
            beam: self.beam,
        })
    }

    /// Ray through continuous pixel coordinate `(u, v)`; pixel centers are at
    /// half-integers.
    pub fn pixel_ray(&self, view: usize, u: f64, v: f64) -> Result<Ray> {
        let frame = self.frame(view)?;
        let d = &self.detector;
        if !(u >= 0.0 && u < d.nu as f64 && v >= 0.0 && v < d.nv as f64) {
            return Err(Error::Domain(format!(
                "pixel ({u}, {v}) outside {}x{} detector",
                d.nu, d.nv
            )));
        }
        Ok(frame.ray(u, v))
    }

    /// Ray through the center of integer pixel `(iu, iv)`.
    pub fn pixel_center_ray(&self, view: usize, iu: usize, iv: usize) -> Result<Ray> {
        self.pixel_ray(view, iu as f64 + 0.5, iv as f64 + 0.5)
    }

    pub fn project_point(&self, view: usize, p: &Vector3<f64>) -> Result<(f64, f64, f64)> {
        self.frame(view)?.project(p)
    }
}

pub fn uniform_angles(n_views: usize, max_angle_deg: f64) -> Vec<f64> {
    match n_views {
        0 => Vec::new(),
        1 => vec![0.0],
        n => (0..n)
            .map(|i| -max_angle_deg + 2.0 * max_angle_deg * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Per-view cached frame: rotation plus detector and beam.
#[derive(Debug, Clone, Copy)]
pub struct ViewFrame {
    pub rotation: Matrix3<f64>,
    pub detector: DetectorGrid,
    pub beam: BeamModel,
}

impl ViewFrame {
    pub fn to_view(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p
    }

    pub fn beam_direction(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    pub fn source(&self) -> Option<Vector3<f64>> {
        self.beam
            .is_cone()
            .then(|| self.rotation.transpose() * Vector3::new(0.0, 0.0, -self.beam.source_distance))
    }

    pub fn ray(&self, u: f64, v: f64) -> Ray {
        let (x, y) = self.detector.pixel_to_plane(u, v);
        let rt = self.rotation.transpose();
        match self.beam.kind {
            BeamKind::Parallel => Ray {
                origin: rt * Vector3::new(x, y, 0.0),
                direction: self.beam_direction(),
            },
            BeamKind::Cone => {
                let d = self.beam.source_distance;
                Ray {
                    origin: rt * Vector3::new(0.0, 0.0, -d),
                    direction: (rt * Vector3::new(x, y, d)).normalize(),
                }
            }
        }
    }

    /// Project a world point to continuous pixel coordinates plus depth.
    /// Depth is the view-frame `z` for parallel beams and the axial distance
    /// from the source for cone beams.
    pub fn project(&self, p: &Vector3<f64>) -> Result<(f64, f64, f64)> {
        let q = self.rotation * p;
        match self.beam.kind {
            BeamKind::Parallel => {
                let (u, v) = self.detector.plane_to_pixel(q.x, q.y);
                Ok((u, v, q.z))
            }
            BeamKind::Cone => {
                let d = self.beam.source_distance;
                let w = d + q.z;
                if w <= 0.0 {
                    return Err(Error::Domain(format!("point {p:?} lies behind the cone source")));
                }
                let m = d / w;
                let (u, v) = self.detector.plane_to_pixel(q.x * m, q.y * m);
                Ok((u, v, w))
            }
        }
    }
}
