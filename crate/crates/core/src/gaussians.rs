//! Learnable Gaussian scene representation and per-view splat setup.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Matrix3, Vector3};

use crate::dual::{self, congruence, det3, DMat3, Dual};
use crate::error::{Error, Result};
use crate::geometry::{BeamKind, ViewFrame};

/// Added to the diagonal of cone-beam screen covariances, in pixels².
pub const BLUR_FLOOR: f64 = 0.09;

/// Splat footprints are truncated at this Mahalanobis radius.
pub const CUTOFF_SIGMA: f64 = 3.0;

const DET_EPS: f64 = 1e-300;

pub fn activate_denza(raw: f64) -> f64 {
    dual::softplus(raw)
}

/// Inverse of [`activate_denza`] for `d > 0`.
pub fn inverse_softplus(d: f64) -> f64 {
    if d > 30.0 {
        d + (-(-d).exp_m1()).ln()
    } else {
        d.exp_m1().ln()
    }
}

/// Symmetric positive-definite 3×3 covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance3(pub Matrix3<f64>);

impl Covariance3 {
    pub fn determinant(&self) -> f64 {
        self.0.determinant()
    }
}

pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let [w, x, y, z] = q.map(|c| c / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn covariance_from_scale_rotation(log_scale: &[f64; 3], q: &[f64; 4]) -> Covariance3 {
    let r = quat_to_matrix(q);
    let s2 = Matrix3::from_diagonal(&Vector3::from(log_scale.map(|s| (2.0 * s).exp())));
    let m = r * s2 * r.transpose();
    Covariance3(0.5 * (m + m.transpose()))
}

/// Screen-space covariance of a Gaussian centred at `position` with world
/// covariance `sigma`. Returns `(cov2d, cov_view)` in world units, or `None`
/// when the Gaussian lies behind a cone source.
pub fn project_covariance(
    sigma: &Covariance3,
    frame: &ViewFrame,
    position: &Vector3<f64>,
) -> Option<(Matrix2<f64>, Matrix3<f64>)> {
    let rv = frame.rotation;
    let cov_view = rv * sigma.0 * rv.transpose();
    match frame.beam.kind {
        BeamKind::Parallel => Some((cov_view.fixed_view::<2, 2>(0, 0).into_owned(), cov_view)),
        BeamKind::Cone => {
            let q = rv * position;
            let d = frame.beam.source_distance;
            let w = d + q.z;
            if w <= 0.0 {
                return None;
            }
            let m = d / w;
            let j = nalgebra::Matrix2x3::new(m, 0.0, -q.x * m / w, 0.0, m, -q.y * m / w);
            Some((j * cov_view * j.transpose(), cov_view))
        }
    }
}

/// Line-integral normalisation `sqrt(2π det(cov_view) / det(cov2d))`.
pub fn gamma(cov_view: &Matrix3<f64>, cov2d: &Matrix2<f64>) -> Result<f64> {
    let d2 = cov2d.determinant();
    let d3 = cov_view.determinant();
    if !(d2 > DET_EPS) || !(d3 > 0.0) {
        return Err(Error::Conditioning(format!(
            "gamma needs positive determinants, got det3 = {d3}, det2 = {d2}"
        )));
    }
    Ok((2.0 * PI * d3 / d2).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScaleBounds {
    pub min: f64,
    pub max: f64,
}

impl ScaleBounds {
    pub fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    /// Default bounds for a volume of the given extent (world units).
    pub fn for_extent(extent: f64) -> Self {
        Self { min: 0.3, max: 0.25 * extent }
    }

    pub fn clamp_log(&self, log_scale: f64) -> f64 {
        log_scale.clamp(self.min.ln(), self.max.ln())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<[f64; 3]>,
    pub log_scales: Vec<[f64; 3]>,
    /// Quaternions in w, x, y, z order.
    pub rotations: Vec<[f64; 4]>,
    pub denza_raw: Vec<f64>,
}

impl GaussianCloud {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            positions: Vec::with_capacity(n),
            log_scales: Vec::with_capacity(n),
            rotations: Vec::with_capacity(n),
            denza_raw: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, position: [f64; 3], log_scale: [f64; 3], rotation: [f64; 4], denza_raw: f64) {
        self.positions.push(position);
        self.log_scales.push(log_scale);
        self.rotations.push(rotation);
        self.denza_raw.push(denza_raw);
    }

    /// Isotropic Gaussian with activated denza `d`.
    pub fn push_isotropic(&mut self, position: [f64; 3], sigma: f64, d: f64) {
        self.push(position, [sigma.ln(); 3], [1.0, 0.0, 0.0, 0.0], inverse_softplus(d));
    }

    pub fn denza(&self, i: usize) -> f64 {
        activate_denza(self.denza_raw[i])
    }

    pub fn covariance(&self, i: usize) -> Covariance3 {
        covariance_from_scale_rotation(&self.log_scales[i], &self.rotations[i])
    }

    pub fn position(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.positions[i])
    }

    /// Keep only the Gaussians for which `keep` is true.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        fn filter<T: Copy>(v: &mut Vec<T>, keep: &[bool]) {
            let mut it = keep.iter();
            v.retain(|_| *it.next().unwrap());
        }
        filter(&mut self.positions, keep);
        filter(&mut self.log_scales, keep);
        filter(&mut self.rotations, keep);
        filter(&mut self.denza_raw, keep);
    }

    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rotations {
            let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
            if n > 0.0 && n.is_finite() {
                for c in q.iter_mut() {
                    *c /= n;
                }
            } else {
                *q = [1.0, 0.0, 0.0, 0.0];
            }
        }
    }

    pub fn clamp_scales(&mut self, bounds: &ScaleBounds) {
        for s in self.log_scales.iter_mut().flatten() {
            *s = bounds.clamp_log(*s);
        }
    }

    /// Total analytic mass `Σ d_i (2π)^{3/2} det(Σ_i)^{1/2}`.
    pub fn total_mass(&self) -> f64 {
        (0..self.len())
            .map(|i| {
                let log_det: f64 = 2.0 * self.log_scales[i].iter().sum::<f64>();
                self.denza(i) * (2.0 * PI).powf(1.5) * (0.5 * log_det).exp()
            })
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.positions.iter().flatten().all(|x| x.is_finite())
            && self.log_scales.iter().flatten().all(|x| x.is_finite())
            && self.rotations.iter().flatten().all(|x| x.is_finite())
            && self.denza_raw.iter().all(|x| x.is_finite())
    }
}

/// Per-Gaussian, per-view splat parameters in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatView {
    pub mean2d: [f64; 2],
    pub cov2d: Matrix2<f64>,
    pub gamma: f64,
    pub depth: f64,
}

/// Rotation matrix of a (not necessarily normalised) dual quaternion.
fn dual_rotation(q: [Dual; 4]) -> DMat3 {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt().recip();
    let [w, x, y, z] = q.map(|c| c * n);
    let one = Dual::constant(1.0);
    let two = 2.0;
    [
        [one - (y * y + z * z) * two, (x * y - w * z) * two, (x * z + w * y) * two],
        [(x * y + w * z) * two, one - (x * x + z * z) * two, (y * z - w * x) * two],
        [(x * z - w * y) * two, (y * z + w * x) * two, one - (x * x + y * y) * two],
    ]
}

/// View-independent part of a Gaussian, carrying derivatives with respect to
/// its eleven raw parameters.
#[derive(Debug, Clone, Copy)]
pub struct GaussianDual {
    pub position: [Dual; 3],
    pub sigma: DMat3,
    pub denza: Dual,
}

impl GaussianDual {
    pub fn new(cloud: &GaussianCloud, i: usize) -> Self {
        let p = cloud.positions[i];
        let s = cloud.log_scales[i];
        let q = cloud.rotations[i];
        let position = [0, 1, 2].map(|k| Dual::variable(p[k], k));
        let var2 = [0, 1, 2].map(|k| Dual::variable(s[k], 3 + k).scale(2.0).exp());
        let r = dual_rotation([0, 1, 2, 3].map(|k| Dual::variable(q[k], 6 + k)));
        let zero = Dual::constant(0.0);
        let mut sigma = [[zero; 3]; 3];
        for a in 0..3 {
            for b in a..3 {
                let mut acc = zero;
                for k in 0..3 {
                    acc = acc + r[a][k] * r[b][k] * var2[k];
                }
                sigma[a][b] = acc;
                sigma[b][a] = acc;
            }
        }
        let denza = Dual::variable(cloud.denza_raw[i], 10).softplus();
        Self { position, sigma, denza }
    }
}

/// Splat parameters with parameter derivatives: mean (pixels), inverse
/// screen covariance (conic) and amplitude `γ·d`.
#[derive(Debug, Clone, Copy)]
pub struct SplatDual {
    pub mean: [Dual; 2],
    /// Inverse screen covariance entries `(a, b, c)` of `[[a, b], [b, c]]`.
    pub conic: [Dual; 3],
    pub amplitude: Dual,
    pub cov2d: Matrix2<f64>,
    pub gamma: f64,
    pub depth: f64,
}

impl SplatDual {
    /// Bounding half-widths (pixels) of the truncated footprint.
    pub fn radius(&self) -> (f64, f64) {
        (
            CUTOFF_SIGMA * self.cov2d[(0, 0)].sqrt(),
            CUTOFF_SIGMA * self.cov2d[(1, 1)].sqrt(),
        )
    }

    pub fn view(&self) -> SplatView {
        SplatView {
            mean2d: [self.mean[0].v, self.mean[1].v],
            cov2d: self.cov2d,
            gamma: self.gamma,
            depth: self.depth,
        }
    }
}

/// Project one Gaussian into a view. `use_gamma = false` replaces γ by 1.
/// Returns `None` for culled Gaussians.
pub fn splat_dual(g: &GaussianDual, frame: &ViewFrame, use_gamma: bool) -> Option<SplatDual> {
    let r = frame.rotation;
    let rows = [
        [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
        [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
        [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
    ];
    let zero = Dual::constant(0.0);
    let mut qv = [zero; 3];
    for a in 0..3 {
        for k in 0..3 {
            if rows[a][k] != 0.0 {
                qv[a] = qv[a] + g.position[k] * rows[a][k];
            }
        }
    }
    let cov_view = congruence(&rows, &g.sigma);
    let det_view = det3(&cov_view);
    let det_cap = frame.detector;
    let ps = det_cap.pixel_size;

    let (mx, my, c2, area_factor, blur, depth) = match frame.beam.kind {
        BeamKind::Parallel => (
            qv[0],
            qv[1],
            [cov_view[0][0], cov_view[0][1], cov_view[1][1]],
            Dual::constant(1.0),
            0.0,
            qv[2].v,
        ),
        BeamKind::Cone => {
            let d = frame.beam.source_distance;
            let w = qv[2] + d;
            if w.v <= 1e-9 * d {
                return None;
            }
            let m = Dual::constant(d) / w;
            let jx = -(qv[0] * m / w);
            let jy = -(qv[1] * m / w);
            // J = [[m, 0, jx], [0, m, jy]]
            let j = [[m, zero, jx], [zero, m, jy]];
            let mut jc = [[zero; 3]; 2];
            for a in 0..2 {
                for b in 0..3 {
                    let mut acc = zero;
                    for k in 0..3 {
                        acc = acc + j[a][k] * cov_view[k][b];
                    }
                    jc[a][b] = acc;
                }
            }
            let mut c = [zero; 3];
            for (slot, (a, b)) in [(0, 0), (0, 1), (1, 1)].into_iter().enumerate() {
                let mut acc = zero;
                for k in 0..3 {
                    acc = acc + jc[a][k] * j[b][k];
                }
                c[slot] = acc;
            }
            // |det [J; n]| = m² · |(x, y, w)| / w for the central ray direction n.
            let len = (qv[0] * qv[0] + qv[1] * qv[1] + w * w).sqrt();
            let area = m * m * len / w;
            (qv[0] * m, qv[1] * m, c, area, BLUR_FLOOR, w.v)
        }
    };

    let det2_world = c2[0] * c2[2] - c2[1] * c2[1];
    if !(det2_world.v > DET_EPS) || !(det_view.v > 0.0) {
        return None;
    }
    let gamma = if use_gamma {
        area_factor * (det_view * (2.0 * PI) / det2_world).sqrt()
    } else {
        Dual::constant(1.0)
    };
    let inv_ps2 = 1.0 / (ps * ps);
    let a = c2[0].scale(inv_ps2) + blur;
    let b = c2[1].scale(inv_ps2);
    let c = c2[2].scale(inv_ps2) + blur;
    let det = a * c - b * b;
    if !(det.v > DET_EPS) {
        return None;
    }
    let inv_det = det.recip();
    let conic = [c * inv_det, -(b * inv_det), a * inv_det];
    let half = [0.5 * det_cap.nu as f64, 0.5 * det_cap.nv as f64];
    let mean = [mx.scale(1.0 / ps) + half[0], my.scale(1.0 / ps) + half[1]];
    Some(SplatDual {
        mean,
        conic,
        amplitude: gamma * g.denza,
        cov2d: Matrix2::new(a.v, b.v, b.v, c.v),
        gamma: gamma.v,
        depth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{view_rotation, BeamModel, DetectorGrid, TiltGeometry};

    fn random_unit_quat(seed: u64) -> [f64; 4] {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let q: [f64; 4] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        q.map(|c| c / n)
    }

    #[test]
    fn identity_covariance() {
        let c = covariance_from_scale_rotation(&[0.0; 3], &[1.0, 0.0, 0.0, 0.0]);
        assert!((c.0 - Matrix3::identity()).abs().max() < 1e-15);
    }

    #[test]
    fn diagonal_covariance_and_rotation_invariant_determinant() {
        let ls = [1f64.ln(), 2f64.ln(), 3f64.ln()];
        let c = covariance_from_scale_rotation(&ls, &[1.0, 0.0, 0.0, 0.0]);
        assert!((c.0 - Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0))).abs().max() < 1e-12);
        for seed in 0..20 {
            let c = covariance_from_scale_rotation(&ls, &random_unit_quat(seed));
            assert!((c.determinant() - 36.0).abs() < 1e-10);
            assert!(c.0.symmetric_eigenvalues().iter().all(|&e| e > 0.0));
        }
    }

    fn frame(angle: f64) -> ViewFrame {
        TiltGeometry::new(vec![angle], DetectorGrid::square(32), BeamModel::parallel())
            .unwrap()
            .frame(0)
            .unwrap()
    }

    #[test]
    fn isotropic_projection_and_gamma() {
        let sigma = 1.7;
        let cov = Covariance3(Matrix3::identity() * sigma * sigma);
        for angle in [-60.0, 0.0, 45.0] {
            let (c2, cv) = project_covariance(&cov, &frame(angle), &Vector3::zeros()).unwrap();
            assert!((c2 - Matrix2::identity() * sigma * sigma).abs().max() < 1e-12);
            let g = gamma(&cv, &c2).unwrap();
            assert!((g - sigma * (2.0 * PI).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn marginal_drops_beam_axis() {
        let cov = Covariance3(Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0)));
        let (c2, cv) = project_covariance(&cov, &frame(0.0), &Vector3::zeros()).unwrap();
        assert!((c2 - Matrix2::new(1.0, 0.0, 0.0, 4.0)).abs().max() < 1e-15);
        let g = gamma(&cv, &c2).unwrap();
        assert!((g - 3.0 * (2.0 * PI).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn tilted_marginal_matches_dense_rotation() {
        let cov = Covariance3(Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0)));
        let (c2, _) = project_covariance(&cov, &frame(30.0), &Vector3::zeros()).unwrap();
        let (s, c) = 30f64.to_radians().sin_cos();
        // rotated covariance entries written out by hand
        let xx = c * c * 1.0 + s * s * 9.0;
        assert!((c2[(0, 0)] - xx).abs() < 1e-12);
        assert!((c2[(1, 1)] - 4.0).abs() < 1e-12);
        assert!(c2[(0, 1)].abs() < 1e-12);
        let _ = view_rotation(30.0);
    }

    #[test]
    fn gamma_rejects_degenerate() {
        assert!(gamma(&Matrix3::identity(), &Matrix2::zeros()).is_err());
    }

    #[test]
    fn denza_activation() {
        assert!((activate_denza(0.0) - 0.6931471805599453).abs() < 1e-12);
        assert!((activate_denza(20.0) - 20.0).abs() < 1e-8);
        assert!(activate_denza(2.0) > activate_denza(1.0));
        for d in [1e-3, 0.5, 1.0, 7.0, 50.0] {
            assert!((activate_denza(inverse_softplus(d)) - d).abs() < 1e-12 * d.max(1.0));
        }
    }

    #[test]
    fn projected_mass_is_view_invariant() {
        let ls = [0.3, -0.2, 0.5];
        let q = random_unit_quat(7);
        let cov = covariance_from_scale_rotation(&ls, &q);
        let expected = (2.0 * PI).powf(1.5) * cov.determinant().sqrt();
        for a in -85..=85 {
            let (c2, cv) = project_covariance(&cov, &frame(a as f64), &Vector3::zeros()).unwrap();
            assert!((cv.determinant() - cov.determinant()).abs() < 1e-10);
            let mass = gamma(&cv, &c2).unwrap() * 2.0 * PI * c2.determinant().sqrt();
            assert!((mass - expected).abs() < 1e-10 * expected, "{a} {mass} {expected}");
        }
    }

    #[test]
    fn splat_dual_matches_plain_projection() {
        let mut cloud = GaussianCloud::new();
        cloud.push([1.0, -2.0, 3.0], [0.2, 0.4, -0.1], random_unit_quat(3), 0.7);
        let g = GaussianDual::new(&cloud, 0);
        let f = frame(25.0);
        let s = splat_dual(&g, &f, true).unwrap();
        let (c2, cv) = project_covariance(&cloud.covariance(0), &f, &cloud.position(0)).unwrap();
        assert!((s.cov2d - c2).abs().max() < 1e-12);
        assert!((s.gamma - gamma(&cv, &c2).unwrap()).abs() < 1e-12);
        let (u, v, _) = f.project(&cloud.position(0)).unwrap();
        assert!((s.mean[0].v - u).abs() < 1e-12 && (s.mean[1].v - v).abs() < 1e-12);
    }

    #[test]
    fn normalize_is_idempotent() {
        let mut cloud = GaussianCloud::new();
        cloud.push([0.0; 3], [0.0; 3], [2.0, 1.0, -1.0, 0.5], 0.0);
        cloud.normalize_rotations();
        let once = cloud.rotations[0];
        cloud.normalize_rotations();
        assert_eq!(once, cloud.rotations[0]);
        let n: f64 = once.iter().map(|c| c * c).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }
}
