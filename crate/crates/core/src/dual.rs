//! Forward-mode dual numbers with a fixed number of derivative lanes.
//!
//! Used to differentiate the short, branchy pose chains (exponential maps,
//! pose composition, slerp) exactly. The number of lanes is the number of
//! residual coordinates the chain depends on: 6 for an ego-pose residual,
//! 12 for an object transform (ego residual plus two keyframe residuals).

use crate::geom::Scalar;
use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug)]
pub struct Dual<const N: usize> {
    pub re: f64,
    pub dx: [f64; N],
}

impl<const N: usize> Dual<N> {
    pub fn constant(v: f64) -> Self {
        Dual { re: v, dx: [0.0; N] }
    }

    /// Variable seeded on lane `i`.
    pub fn var(v: f64, i: usize) -> Self {
        let mut dx = [0.0; N];
        dx[i] = 1.0;
        Dual { re: v, dx }
    }

    /// Chain rule through a unary function with value `re` and local
    /// derivative `dre`.
    fn chain(&self, re: f64, dre: f64) -> Self {
        let mut dx = [0.0; N];
        for (o, d) in dx.iter_mut().zip(self.dx.iter()) {
            *o = dre * d;
        }
        Dual { re, dx }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let mut dx = self.dx;
        for (a, b) in dx.iter_mut().zip(o.dx.iter()) {
            *a += b;
        }
        Dual { re: self.re + o.re, dx }
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        let mut dx = self.dx;
        for (a, b) in dx.iter_mut().zip(o.dx.iter()) {
            *a -= b;
        }
        Dual { re: self.re - o.re, dx }
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut dx = [0.0; N];
        for i in 0..N {
            dx[i] = self.dx[i] * o.re + self.re * o.dx[i];
        }
        Dual { re: self.re * o.re, dx }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.re;
        let mut dx = [0.0; N];
        for i in 0..N {
            dx[i] = (self.dx[i] - self.re * inv * o.dx[i]) * inv;
        }
        Dual { re: self.re * inv, dx }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    fn neg(self) -> Self {
        let mut dx = self.dx;
        for a in dx.iter_mut() {
            *a = -*a;
        }
        Dual { re: -self.re, dx }
    }
}

impl<const N: usize> Scalar for Dual<N> {
    fn from_f64(v: f64) -> Self {
        Dual::constant(v)
    }

    fn value(self) -> f64 {
        self.re
    }

    fn sin(self) -> Self {
        self.chain(self.re.sin(), self.re.cos())
    }

    fn cos(self) -> Self {
        self.chain(self.re.cos(), -self.re.sin())
    }

    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        self.chain(s, 0.5 / s)
    }

    fn acos(self) -> Self {
        self.chain(self.re.acos(), -1.0 / (1.0 - self.re * self.re).sqrt())
    }

    fn atan2(self, other: Self) -> Self {
        let d = self.re * self.re + other.re * other.re;
        let mut dx = [0.0; N];
        for i in 0..N {
            dx[i] = (other.re * self.dx[i] - self.re * other.dx[i]) / d;
        }
        Dual { re: self.re.atan2(other.re), dx }
    }
}
