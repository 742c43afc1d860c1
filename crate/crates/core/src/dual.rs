//! Minimal forward-mode dual numbers.
//!
//! Used to obtain the exact Jacobian of the per-Gaussian setup (covariance,
//! projection, γ, activation) with respect to the eleven raw parameters of a
//! Gaussian. Pixel/voxel loops then only accumulate gradients with respect to
//! a handful of splat quantities, which are chained through this Jacobian.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Number of raw parameters per Gaussian: position (3), log-scale (3),
/// quaternion (4), raw denza (1).
pub const NPARAM: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: [f64; NPARAM],
}

impl Dual {
    pub const fn constant(v: f64) -> Self {
        Self { v, d: [0.0; NPARAM] }
    }

    pub fn variable(v: f64, index: usize) -> Self {
        let mut d = [0.0; NPARAM];
        d[index] = 1.0;
        Self { v, d }
    }

    #[inline]
    fn chain(self, v: f64, dv: f64) -> Self {
        let mut d = self.d;
        for x in d.iter_mut() {
            *x *= dv;
        }
        Self { v, d }
    }

    pub fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }

    pub fn ln(self) -> Self {
        self.chain(self.v.ln(), 1.0 / self.v)
    }

    pub fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s)
    }

    pub fn recip(self) -> Self {
        let r = 1.0 / self.v;
        self.chain(r, -r * r)
    }

    pub fn abs(self) -> Self {
        if self.v < 0.0 {
            -self
        } else {
            self
        }
    }

    /// `ln(1 + e^x)`, numerically stable, derivative `sigmoid(x)`.
    pub fn softplus(self) -> Self {
        self.chain(softplus(self.v), sigmoid(self.v))
    }

    pub fn scale(self, k: f64) -> Self {
        self.chain(self.v * k, k)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(mut self, rhs: Dual) -> Dual {
        self.v += rhs.v;
        for (a, b) in self.d.iter_mut().zip(rhs.d) {
            *a += b;
        }
        self
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(mut self, rhs: Dual) -> Dual {
        self.v -= rhs.v;
        for (a, b) in self.d.iter_mut().zip(rhs.d) {
            *a -= b;
        }
        self
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, rhs: Dual) -> Dual {
        let mut d = [0.0; NPARAM];
        for i in 0..NPARAM {
            d[i] = self.d[i] * rhs.v + self.v * rhs.d[i];
        }
        Dual { v: self.v * rhs.v, d }
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, rhs: Dual) -> Dual {
        self * rhs.recip()
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        self.scale(-1.0)
    }
}

impl Add<f64> for Dual {
    type Output = Dual;
    fn add(mut self, rhs: f64) -> Dual {
        self.v += rhs;
        self
    }
}

impl Mul<f64> for Dual {
    type Output = Dual;
    fn mul(self, rhs: f64) -> Dual {
        self.scale(rhs)
    }
}

pub type DMat3 = [[Dual; 3]; 3];

pub fn det3(m: &DMat3) -> Dual {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Inverse of a symmetric 3×3 matrix.
pub fn inv_sym3(m: &DMat3) -> DMat3 {
    let det = det3(m);
    let inv_det = det.recip();
    let c00 = m[1][1] * m[2][2] - m[1][2] * m[2][1];
    let c01 = m[0][2] * m[2][1] - m[0][1] * m[2][2];
    let c02 = m[0][1] * m[1][2] - m[0][2] * m[1][1];
    let c11 = m[0][0] * m[2][2] - m[0][2] * m[2][0];
    let c12 = m[0][2] * m[1][0] - m[0][0] * m[1][2];
    let c22 = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    [
        [c00 * inv_det, c01 * inv_det, c02 * inv_det],
        [c01 * inv_det, c11 * inv_det, c12 * inv_det],
        [c02 * inv_det, c12 * inv_det, c22 * inv_det],
    ]
}

/// `a · m · aᵀ` where `a` is a constant matrix.
pub fn congruence(a: &[[f64; 3]; 3], m: &DMat3) -> DMat3 {
    let zero = Dual::constant(0.0);
    let mut am = [[zero; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = zero;
            for k in 0..3 {
                if a[i][k] != 0.0 {
                    acc = acc + m[k][j] * a[i][k];
                }
            }
            am[i][j] = acc;
        }
    }
    let mut out = [[zero; 3]; 3];
    for i in 0..3 {
        for j in i..3 {
            let mut acc = zero;
            for k in 0..3 {
                if a[j][k] != 0.0 {
                    acc = acc + am[i][k] * a[j][k];
                }
            }
            out[i][j] = acc;
            out[j][i] = acc;
        }
    }
    out
}
