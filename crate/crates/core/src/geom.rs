//! Minimal 3D vector/matrix/quaternion math, generic over the scalar type.
//!
//! The same formulas run on plain `f64` and on [`crate::dual::Dual`] numbers,
//! which is how the pose-refinement chains obtain exact Jacobians without a
//! second hand-derived implementation.

use serde::{Deserialize, Serialize};
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar admitted by the geometry routines.
///
/// `value()` exposes the underlying real part and drives branch decisions
/// (small-angle fallbacks, shortest-arc sign flips), so branches are taken
/// consistently between plain and dual evaluation.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(v: f64) -> Self;
    fn value(self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn sqrt(self) -> Self;
    fn acos(self) -> Self;
    fn atan2(self, other: Self) -> Self;
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn acos(self) -> Self {
        f64::acos(self)
    }
    #[inline]
    fn atan2(self, other: Self) -> Self {
        f64::atan2(self, other)
    }
}

/// 3-vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vec3<S = f64>(pub [S; 3]);

/// Row-major 3×3 matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat3<S = f64>(pub [[S; 3]; 3]);

impl<S: Scalar> Vec3<S> {
    pub fn new(x: S, y: S, z: S) -> Self {
        Vec3([x, y, z])
    }

    pub fn zero() -> Self {
        let z = S::from_f64(0.0);
        Vec3([z, z, z])
    }

    pub fn x(&self) -> S {
        self.0[0]
    }
    pub fn y(&self) -> S {
        self.0[1]
    }
    pub fn z(&self) -> S {
        self.0[2]
    }

    pub fn dot(&self, o: &Vec3<S>) -> S {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }

    pub fn cross(&self, o: &Vec3<S>) -> Vec3<S> {
        Vec3([
            self.0[1] * o.0[2] - self.0[2] * o.0[1],
            self.0[2] * o.0[0] - self.0[0] * o.0[2],
            self.0[0] * o.0[1] - self.0[1] * o.0[0],
        ])
    }

    pub fn norm_sq(&self) -> S {
        self.dot(self)
    }

    pub fn norm(&self) -> S {
        self.norm_sq().sqrt()
    }

    pub fn normalized(&self) -> Vec3<S> {
        let n = self.norm();
        Vec3([self.0[0] / n, self.0[1] / n, self.0[2] / n])
    }

    pub fn scale(&self, s: S) -> Vec3<S> {
        Vec3([self.0[0] * s, self.0[1] * s, self.0[2] * s])
    }

    /// Infinity norm of the real parts.
    pub fn norm_inf_value(&self) -> f64 {
        self.0
            .iter()
            .map(|c| c.value().abs())
            .fold(0.0, f64::max)
    }

    pub fn map_f64(&self) -> Vec3<f64> {
        Vec3([self.0[0].value(), self.0[1].value(), self.0[2].value()])
    }
}

impl Vec3<f64> {
    pub fn lift<S: Scalar>(&self) -> Vec3<S> {
        Vec3([
            S::from_f64(self.0[0]),
            S::from_f64(self.0[1]),
            S::from_f64(self.0[2]),
        ])
    }
}

impl<S: Scalar> Add for Vec3<S> {
    type Output = Vec3<S>;
    fn add(self, o: Vec3<S>) -> Vec3<S> {
        Vec3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl<S: Scalar> Sub for Vec3<S> {
    type Output = Vec3<S>;
    fn sub(self, o: Vec3<S>) -> Vec3<S> {
        Vec3([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

impl<S: Scalar> Neg for Vec3<S> {
    type Output = Vec3<S>;
    fn neg(self) -> Vec3<S> {
        Vec3([-self.0[0], -self.0[1], -self.0[2]])
    }
}

impl<S: Scalar> Mat3<S> {
    pub fn identity() -> Self {
        let o = S::from_f64(1.0);
        let z = S::from_f64(0.0);
        Mat3([[o, z, z], [z, o, z], [z, z, o]])
    }

    pub fn zero() -> Self {
        let z = S::from_f64(0.0);
        Mat3([[z, z, z], [z, z, z], [z, z, z]])
    }

    /// Skew-symmetric matrix such that `skew(v) * w == v × w`.
    pub fn skew(v: &Vec3<S>) -> Self {
        let z = S::from_f64(0.0);
        Mat3([
            [z, -v.0[2], v.0[1]],
            [v.0[2], z, -v.0[0]],
            [-v.0[1], v.0[0], z],
        ])
    }

    pub fn transpose(&self) -> Mat3<S> {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mul_vec(&self, v: &Vec3<S>) -> Vec3<S> {
        let m = &self.0;
        Vec3([
            m[0][0] * v.0[0] + m[0][1] * v.0[1] + m[0][2] * v.0[2],
            m[1][0] * v.0[0] + m[1][1] * v.0[1] + m[1][2] * v.0[2],
            m[2][0] * v.0[0] + m[2][1] * v.0[1] + m[2][2] * v.0[2],
        ])
    }

    pub fn mul_mat(&self, o: &Mat3<S>) -> Mat3<S> {
        let mut r = Mat3::zero();
        for i in 0..3 {
            for j in 0..3 {
                r.0[i][j] = self.0[i][0] * o.0[0][j]
                    + self.0[i][1] * o.0[1][j]
                    + self.0[i][2] * o.0[2][j];
            }
        }
        r
    }

    pub fn add_mat(&self, o: &Mat3<S>) -> Mat3<S> {
        let mut r = Mat3::zero();
        for i in 0..3 {
            for j in 0..3 {
                r.0[i][j] = self.0[i][j] + o.0[i][j];
            }
        }
        r
    }

    pub fn scale(&self, s: S) -> Mat3<S> {
        let mut r = *self;
        for row in r.0.iter_mut() {
            for v in row.iter_mut() {
                *v = *v * s;
            }
        }
        r
    }

    pub fn det(&self) -> S {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn map_f64(&self) -> Mat3<f64> {
        let mut r = Mat3::<f64>::zero();
        for i in 0..3 {
            for j in 0..3 {
                r.0[i][j] = self.0[i][j].value();
            }
        }
        r
    }
}

impl Mat3<f64> {
    pub fn lift<S: Scalar>(&self) -> Mat3<S> {
        let mut r = Mat3::<S>::zero();
        for i in 0..3 {
            for j in 0..3 {
                r.0[i][j] = S::from_f64(self.0[i][j]);
            }
        }
        r
    }

    /// Max absolute entry of `RᵀR − I`; zero for orthonormal matrices.
    pub fn orthonormality_defect(&self) -> f64 {
        let g = self.transpose().mul_mat(self);
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g.0[i][j] - target).abs());
            }
        }
        worst
    }
}

/// Axis-aligned box in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3<f64>,
    pub max: Vec3<f64>,
}

impl Aabb {
    pub fn empty() -> Self {
        Aabb {
            min: Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
            max: Vec3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        }
    }

    pub fn include(&mut self, p: &Vec3<f64>) {
        for i in 0..3 {
            self.min.0[i] = self.min.0[i].min(p.0[i]);
            self.max.0[i] = self.max.0[i].max(p.0[i]);
        }
    }

    pub fn center(&self) -> Vec3<f64> {
        (self.min + self.max).scale(0.5)
    }

    pub fn half_extents(&self) -> Vec3<f64> {
        (self.max - self.min).scale(0.5)
    }

    pub fn diameter(&self) -> f64 {
        (self.max - self.min).norm()
    }

    pub fn contains(&self, p: &Vec3<f64>) -> bool {
        (0..3).all(|i| p.0[i] >= self.min.0[i] && p.0[i] <= self.max.0[i])
    }

    /// Grows every side by `frac` of its extent, with a minimum extent
    /// floor so degenerate boxes stay usable.
    pub fn padded(&self, frac: f64, min_extent: f64) -> Aabb {
        let mut out = *self;
        for i in 0..3 {
            let ext = (self.max.0[i] - self.min.0[i]).max(0.0);
            let pad = (ext * frac).max((min_extent - ext).max(0.0) * 0.5);
            out.min.0[i] -= pad;
            out.max.0[i] += pad;
        }
        out
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|i| self.min.0[i] <= self.max.0[i] && self.min.0[i].is_finite() && self.max.0[i].is_finite())
    }
}

/// Unit quaternion `(w, x, y, z)`.
#[derive(Clone, Copy, Debug)]
pub struct Quat<S = f64> {
    pub w: S,
    pub x: S,
    pub y: S,
    pub z: S,
}

impl<S: Scalar> Quat<S> {
    pub fn identity() -> Self {
        Quat {
            w: S::from_f64(1.0),
            x: S::from_f64(0.0),
            y: S::from_f64(0.0),
            z: S::from_f64(0.0),
        }
    }

    /// Shepperd-style conversion picking the best-conditioned branch by the
    /// real part of the matrix entries.
    pub fn from_matrix(m: &Mat3<S>) -> Self {
        let e = &m.0;
        let quarter = S::from_f64(0.25);
        let one = S::from_f64(1.0);
        let trace = e[0][0].value() + e[1][1].value() + e[2][2].value();
        if trace > 0.0 {
            let s = (one + e[0][0] + e[1][1] + e[2][2]).sqrt() * S::from_f64(2.0);
            Quat {
                w: quarter * s,
                x: (e[2][1] - e[1][2]) / s,
                y: (e[0][2] - e[2][0]) / s,
                z: (e[1][0] - e[0][1]) / s,
            }
        } else if e[0][0].value() > e[1][1].value() && e[0][0].value() > e[2][2].value() {
            let s = (one + e[0][0] - e[1][1] - e[2][2]).sqrt() * S::from_f64(2.0);
            Quat {
                w: (e[2][1] - e[1][2]) / s,
                x: quarter * s,
                y: (e[0][1] + e[1][0]) / s,
                z: (e[0][2] + e[2][0]) / s,
            }
        } else if e[1][1].value() > e[2][2].value() {
            let s = (one - e[0][0] + e[1][1] - e[2][2]).sqrt() * S::from_f64(2.0);
            Quat {
                w: (e[0][2] - e[2][0]) / s,
                x: (e[0][1] + e[1][0]) / s,
                y: quarter * s,
                z: (e[1][2] + e[2][1]) / s,
            }
        } else {
            let s = (one - e[0][0] - e[1][1] + e[2][2]).sqrt() * S::from_f64(2.0);
            Quat {
                w: (e[1][0] - e[0][1]) / s,
                x: (e[0][2] + e[2][0]) / s,
                y: (e[1][2] + e[2][1]) / s,
                z: quarter * s,
            }
        }
    }

    pub fn dot(&self, o: &Quat<S>) -> S {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn normalized(&self) -> Quat<S> {
        let n = self.dot(self).sqrt();
        Quat {
            w: self.w / n,
            x: self.x / n,
            y: self.y / n,
            z: self.z / n,
        }
    }

    pub fn neg(&self) -> Quat<S> {
        Quat {
            w: -self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn to_matrix(&self) -> Mat3<S> {
        let one = S::from_f64(1.0);
        let two = S::from_f64(2.0);
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Mat3([
            [
                one - two * (y * y + z * z),
                two * (x * y - w * z),
                two * (x * z + w * y),
            ],
            [
                two * (x * y + w * z),
                one - two * (x * x + z * z),
                two * (y * z - w * x),
            ],
            [
                two * (x * z - w * y),
                two * (y * z + w * x),
                one - two * (x * x + y * y),
            ],
        ])
    }

    /// Geodesic interpolation from `self` (at 0) to `other` (at 1) with the
    /// shortest-arc sign correction. Falls back to normalized lerp for
    /// nearly parallel quaternions.
    pub fn slerp(&self, other: &Quat<S>, t: S) -> Quat<S> {
        let mut b = *other;
        let mut d = self.dot(&b);
        if d.value() < 0.0 {
            b = b.neg();
            d = -d;
        }
        let one = S::from_f64(1.0);
        if d.value() > 1.0 - 1e-9 {
            let q = Quat {
                w: self.w + (b.w - self.w) * t,
                x: self.x + (b.x - self.x) * t,
                y: self.y + (b.y - self.y) * t,
                z: self.z + (b.z - self.z) * t,
            };
            return q.normalized();
        }
        let theta = d.acos();
        let sin_theta = theta.sin();
        let wa = ((one - t) * theta).sin() / sin_theta;
        let wb = (t * theta).sin() / sin_theta;
        Quat {
            w: self.w * wa + b.w * wb,
            x: self.x * wa + b.x * wb,
            y: self.y * wa + b.y * wb,
            z: self.z * wa + b.z * wb,
        }
    }
}
