//! Scalar abstraction and small fixed-size linear algebra.
//!
//! Every numerical routine in this crate that must be differentiable is
//! written against the [`Real`] trait, so the same code runs on plain
//! `f64` and on tape variables from [`crate::autodiff`].

use core::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar type usable in simulation code: `f64` or a tape variable.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// Lift a constant into this scalar type. Constants carry no gradient.
    fn lit(v: f64) -> Self;
    /// Current numeric value (used for branching; branches are frozen
    /// with respect to differentiation).
    fn val(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn abs(self) -> Self;
    fn recip(self) -> Self {
        Self::lit(1.0) / self
    }
}

#[inline]
pub(crate) fn f64_sqrt(v: f64) -> f64 {
    #[cfg(feature = "std")]
    {
        v.sqrt()
    }
    #[cfg(not(feature = "std"))]
    {
        libm::sqrt(v)
    }
}

#[inline]
pub(crate) fn f64_exp(v: f64) -> f64 {
    #[cfg(feature = "std")]
    {
        v.exp()
    }
    #[cfg(not(feature = "std"))]
    {
        libm::exp(v)
    }
}

#[inline]
pub(crate) fn f64_ln(v: f64) -> f64 {
    #[cfg(feature = "std")]
    {
        v.ln()
    }
    #[cfg(not(feature = "std"))]
    {
        libm::log(v)
    }
}

#[inline]
pub(crate) fn f64_powi(v: f64, n: i32) -> f64 {
    #[cfg(feature = "std")]
    {
        v.powi(n)
    }
    #[cfg(not(feature = "std"))]
    {
        libm::pow(v, n as f64)
    }
}

#[inline]
pub(crate) fn f64_cos(v: f64) -> f64 {
    #[cfg(feature = "std")]
    {
        v.cos()
    }
    #[cfg(not(feature = "std"))]
    {
        libm::cos(v)
    }
}

impl Real for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn val(self) -> f64 {
        self
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64_sqrt(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64_exp(self)
    }
    #[inline]
    fn abs(self) -> Self {
        if self < 0.0 {
            -self
        } else {
            self
        }
    }
}

/// Logistic sigmoid, numerically stable on both tails.
pub fn sigmoid<R: Real>(x: R) -> R {
    if x.val() >= 0.0 {
        let e = (-x).exp();
        R::lit(1.0) / (R::lit(1.0) + e)
    } else {
        let e = x.exp();
        e / (R::lit(1.0) + e)
    }
}

/// Inverse of [`sigmoid`] on (0, 1).
pub fn logit(p: f64) -> f64 {
    f64_ln(p / (1.0 - p))
}

/// 3-vector over any [`Real`] scalar.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct V3<R> {
    pub x: R,
    pub y: R,
    pub z: R,
}

/// Plain `f64` 3-vector.
pub type Vec3 = V3<f64>;

impl<R: Real> V3<R> {
    #[inline]
    pub fn new(x: R, y: R, z: R) -> Self {
        Self { x, y, z }
    }
    #[inline]
    pub fn zero() -> Self {
        Self::splat(0.0)
    }
    #[inline]
    pub fn splat(v: f64) -> Self {
        Self::new(R::lit(v), R::lit(v), R::lit(v))
    }
    #[inline]
    pub fn lit(v: Vec3) -> Self {
        Self::new(R::lit(v.x), R::lit(v.y), R::lit(v.z))
    }
    #[inline]
    pub fn value(self) -> Vec3 {
        Vec3::new(self.x.val(), self.y.val(), self.z.val())
    }
    #[inline]
    pub fn scale(self, s: R) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
    #[inline]
    pub fn dot(self, o: Self) -> R {
        self.x * o.x + self.y * o.y + self.z * o.z
    }
    #[inline]
    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }
    #[inline]
    pub fn norm_sq(self) -> R {
        self.dot(self)
    }
    #[inline]
    pub fn norm(self) -> R {
        self.norm_sq().sqrt()
    }
    /// Component access by axis index (0, 1, 2).
    #[inline]
    pub fn get(self, axis: usize) -> R {
        match axis {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }
    #[inline]
    pub fn set(&mut self, axis: usize, v: R) {
        match axis {
            0 => self.x = v,
            1 => self.y = v,
            _ => self.z = v,
        }
    }
}

impl Vec3 {
    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        if n > 0.0 {
            self.scale(1.0 / n)
        } else {
            self
        }
    }
}

impl<R: Real> Add for V3<R> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<R: Real> Sub for V3<R> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<R: Real> Neg for V3<R> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

/// Column-major-free 3x3 matrix; `m[r][c]` is row `r`, column `c`.
#[derive(Clone, Copy, Debug)]
pub struct M3<R> {
    pub m: [[R; 3]; 3],
}

/// Plain `f64` 3x3 matrix.
pub type Mat3 = M3<f64>;

impl<R: Real> M3<R> {
    pub fn zero() -> Self {
        Self {
            m: [[R::lit(0.0); 3]; 3],
        }
    }
    pub fn identity() -> Self {
        let mut a = Self::zero();
        for i in 0..3 {
            a.m[i][i] = R::lit(1.0);
        }
        a
    }
    pub fn lit(v: Mat3) -> Self {
        let mut a = Self::zero();
        for r in 0..3 {
            for c in 0..3 {
                a.m[r][c] = R::lit(v.m[r][c]);
            }
        }
        a
    }
    pub fn value(self) -> Mat3 {
        let mut a = Mat3::zero();
        for r in 0..3 {
            for c in 0..3 {
                a.m[r][c] = self.m[r][c].val();
            }
        }
        a
    }
    pub fn from_cols(c0: V3<R>, c1: V3<R>, c2: V3<R>) -> Self {
        Self {
            m: [
                [c0.x, c1.x, c2.x],
                [c0.y, c1.y, c2.y],
                [c0.z, c1.z, c2.z],
            ],
        }
    }
    pub fn col(self, c: usize) -> V3<R> {
        V3::new(self.m[0][c], self.m[1][c], self.m[2][c])
    }
    pub fn transpose(self) -> Self {
        let mut a = Self::zero();
        for r in 0..3 {
            for c in 0..3 {
                a.m[r][c] = self.m[c][r];
            }
        }
        a
    }
    pub fn mul_vec(self, v: V3<R>) -> V3<R> {
        V3::new(
            self.m[0][0] * v.x + self.m[0][1] * v.y + self.m[0][2] * v.z,
            self.m[1][0] * v.x + self.m[1][1] * v.y + self.m[1][2] * v.z,
            self.m[2][0] * v.x + self.m[2][1] * v.y + self.m[2][2] * v.z,
        )
    }
    pub fn mul_mat(self, o: Self) -> Self {
        let mut a = Self::zero();
        for r in 0..3 {
            for c in 0..3 {
                a.m[r][c] =
                    self.m[r][0] * o.m[0][c] + self.m[r][1] * o.m[1][c] + self.m[r][2] * o.m[2][c];
            }
        }
        a
    }
    pub fn add_mat(self, o: Self) -> Self {
        let mut a = Self::zero();
        for r in 0..3 {
            for c in 0..3 {
                a.m[r][c] = self.m[r][c] + o.m[r][c];
            }
        }
        a
    }
    pub fn sub_mat(self, o: Self) -> Self {
        let mut a = Self::zero();
        for r in 0..3 {
            for c in 0..3 {
                a.m[r][c] = self.m[r][c] - o.m[r][c];
            }
        }
        a
    }
    pub fn scale(self, s: R) -> Self {
        let mut a = Self::zero();
        for r in 0..3 {
            for c in 0..3 {
                a.m[r][c] = self.m[r][c] * s;
            }
        }
        a
    }
    /// Outer product `a b^T`.
    pub fn outer(a: V3<R>, b: V3<R>) -> Self {
        Self {
            m: [
                [a.x * b.x, a.x * b.y, a.x * b.z],
                [a.y * b.x, a.y * b.y, a.y * b.z],
                [a.z * b.x, a.z * b.y, a.z * b.z],
            ],
        }
    }
    pub fn det(self) -> R {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }
    /// Inverse via the adjugate. Caller guards against a singular matrix
    /// by checking `det().val()` first.
    pub fn inverse(self) -> Self {
        let m = &self.m;
        let inv_det = self.det().recip();
        let mut a = Self::zero();
        a.m[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_det;
        a.m[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det;
        a.m[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det;
        a.m[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_det;
        a.m[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det;
        a.m[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det;
        a.m[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_det;
        a.m[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det;
        a.m[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det;
        a
    }
    pub fn frobenius_sq(self) -> R {
        let mut s = R::lit(0.0);
        for r in 0..3 {
            for c in 0..3 {
                s = s + self.m[r][c] * self.m[r][c];
            }
        }
        s
    }
}

const POLAR_MAX_ITERS: usize = 20;
const POLAR_TOL: f64 = 1e-10;

/// Rotation factor of the polar decomposition `A = R S`, computed with
/// scaled Higham iterations. Expects `det(A) > 0` at the numeric level;
/// a near-singular input falls back to the identity. A reflection
/// (`det < 0`) is corrected so the result is a proper rotation; the
/// correction direction is held constant with respect to differentiation.
pub fn polar_rotation<R: Real>(a: M3<R>) -> M3<R> {
    // Normalize so the degeneracy test is scale-invariant; covariance
    // inputs from small clusters have entries far below 1, and an
    // absolute determinant threshold would reject them outright. The
    // rotation factor itself is invariant to uniform scaling, so the
    // frozen literal scale does not affect derivatives.
    let norm = a.frobenius_sq().val().sqrt();
    if norm < 1e-300 {
        return M3::identity();
    }
    let a = a.scale(R::lit(1.0 / norm));
    if a.det().val().abs() < 1e-12 {
        return M3::identity();
    }
    let mut y = a;
    for _ in 0..POLAR_MAX_ITERS {
        let y_inv_t = y.inverse().transpose();
        // Frobenius-norm scaling accelerates convergence far from
        // orthogonality.
        let gamma = (y_inv_t.frobenius_sq().sqrt() / y.frobenius_sq().sqrt()).sqrt();
        let next = y.scale(gamma).add_mat(y_inv_t.scale(gamma.recip())).scale(R::lit(0.5));
        let diff = next.sub_mat(y).frobenius_sq().val();
        y = next;
        if diff < POLAR_TOL * POLAR_TOL {
            break;
        }
    }
    if y.det().val() < 0.0 {
        // Closest proper rotation: flip the singular direction with the
        // smallest singular value. The eigenvector is computed on plain
        // values, so the flip plane is frozen for the backward pass.
        let s = y.transpose().mul_mat(a).value();
        let (_, v) = sym_eig_min(s);
        let h = M3::<R>::identity().sub_mat(M3::outer(V3::lit(v), V3::lit(v)).scale(R::lit(2.0)));
        y = y.mul_mat(h);
    }
    y
}

/// Smallest eigenvalue and its unit eigenvector of a symmetric 3x3
/// matrix, by cyclic Jacobi rotations.
pub fn sym_eig_min(a: Mat3) -> (f64, Vec3) {
    let mut d = a;
    let mut v = Mat3::identity();
    for _ in 0..32 {
        // largest off-diagonal entry
        let mut p = 0;
        let mut q = 1;
        let mut big = 0.0f64;
        for r in 0..3 {
            for c in (r + 1)..3 {
                let x = d.m[r][c].abs();
                if x > big {
                    big = x;
                    p = r;
                    q = c;
                }
            }
        }
        if big < 1e-14 {
            break;
        }
        let app = d.m[p][p];
        let aqq = d.m[q][q];
        let apq = d.m[p][q];
        let theta = 0.5 * f64_atan2(2.0 * apq, aqq - app);
        let (c, s) = (f64_cos(theta), f64_sin(theta));
        let mut rot = Mat3::identity();
        rot.m[p][p] = c;
        rot.m[q][q] = c;
        rot.m[p][q] = s;
        rot.m[q][p] = -s;
        d = rot.transpose().mul_mat(d).mul_mat(rot);
        v = v.mul_mat(rot);
    }
    let mut best = 0;
    for i in 1..3 {
        if d.m[i][i] < d.m[best][best] {
            best = i;
        }
    }
    (d.m[best][best], v.col(best))
}

#[inline]
fn f64_sin(v: f64) -> f64 {
    #[cfg(feature = "std")]
    {
        v.sin()
    }
    #[cfg(not(feature = "std"))]
    {
        libm::sin(v)
    }
}

#[inline]
fn f64_atan2(y: f64, x: f64) -> f64 {
    #[cfg(feature = "std")]
    {
        y.atan2(x)
    }
    #[cfg(not(feature = "std"))]
    {
        libm::atan2(y, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rot_z(t: f64) -> Mat3 {
        let (c, s) = (t.cos(), t.sin());
        Mat3 {
            m: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    #[test]
    fn inverse_roundtrip() {
        let a = Mat3 {
            m: [[2.0, 1.0, 0.3], [0.1, 3.0, 0.5], [0.2, 0.4, 1.5]],
        };
        let id = a.mul_mat(a.inverse());
        for r in 0..3 {
            for c in 0..3 {
                let want = if r == c { 1.0 } else { 0.0 };
                assert!((id.m[r][c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn polar_recovers_rotation() {
        let r = rot_z(0.7);
        // stretch then rotate: A = R * S
        let s = Mat3 {
            m: [[2.0, 0.2, 0.0], [0.2, 1.5, 0.1], [0.0, 0.1, 0.8]],
        };
        let a = r.mul_mat(s);
        let got = polar_rotation(a);
        for i in 0..3 {
            for j in 0..3 {
                assert!((got.m[i][j] - r.m[i][j]).abs() < 1e-9, "{i}{j}");
            }
        }
        assert!((got.det() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn polar_reflection_corrected() {
        let mut a = rot_z(0.3);
        a.m[0][2] *= 1.0;
        // negate one column to force det < 0
        for r in 0..3 {
            a.m[r][2] = -a.m[r][2];
        }
        let got = polar_rotation(a);
        assert!((got.det() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sym_eig_min_simple() {
        let a = Mat3 {
            m: [[4.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 9.0]],
        };
        let (l, v) = sym_eig_min(a);
        assert!((l - 2.0).abs() < 1e-12);
        assert!((v.y.abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_logit_roundtrip() {
        for &p in &[1e-6, 0.3, 0.5, 0.9, 1.0 - 1e-6] {
            assert!((sigmoid(logit(p)) - p).abs() < 1e-12);
        }
    }
}
