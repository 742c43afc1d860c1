//! Independent numerical oracles shared by the integration tests.
#![allow(dead_code)]

pub mod gradcheck;

use denza::GaussianCloud;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Adaptive Simpson quadrature of `f` over `[a, b]`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = simpson(fa, fm, fb, a, b);
    recurse(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Central finite difference of `f` at `x` along coordinate `i`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

pub fn close(analytic: f64, numeric: f64, rel: f64, abs: f64) -> bool {
    let err = (analytic - numeric).abs();
    err <= abs || err <= rel * analytic.abs().max(numeric.abs())
}

/// Read/write a cloud parameter in the dual layout:
/// position 0..3, log-scale 3..6, quaternion 6..10, raw denza 10.
pub fn param_mut(cloud: &mut GaussianCloud, i: usize, p: usize) -> &mut f64 {
    match p {
        0..=2 => &mut cloud.positions[i][p],
        3..=5 => &mut cloud.log_scales[i][p - 3],
        6..=9 => &mut cloud.rotations[i][p - 6],
        _ => &mut cloud.denza_raw[i],
    }
}

pub fn random_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
    let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    q.map(|c| c / n)
}

/// Random SPD matrix from random log-scales and rotation.
pub fn random_spd(rng: &mut ChaCha8Rng) -> nalgebra::Matrix3<f64> {
    let ls: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.7..0.9));
    denza::gaussians::covariance_from_scale_rotation(&ls, &random_quat(rng)).0
}
