//! Scalar abstraction for the dynamics kernels.
//!
//! The recursive algorithms are written once, generic over [`Real`], and run
//! either on plain `f64` or on [`Dual`] numbers carrying a batch of derivative
//! lanes. Sweeping tangent directions through the dual lanes yields exact
//! first derivatives of any kernel without a hand-derived adjoint pass.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

/// Minimal real-number interface needed by the dynamics kernels.
pub trait Real:
    Copy
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
{
    fn from_f64(x: f64) -> Self;
    /// Primal (value) part.
    fn value(self) -> f64;
    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn atan2(self, x: Self) -> Self;
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
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
    fn atan2(self, x: Self) -> Self {
        f64::atan2(self, x)
    }
}

/// Forward-mode dual number with `K` derivative lanes.
///
/// Arithmetic propagates the value and all lanes simultaneously, so one
/// kernel evaluation yields `K` directional derivatives while sharing the
/// primal computation.
#[derive(Clone, Copy, Debug)]
pub struct Dual<const K: usize> {
    pub re: f64,
    pub eps: [f64; K],
}

impl<const K: usize> Dual<K> {
    #[inline]
    pub fn constant(re: f64) -> Self {
        Self { re, eps: [0.0; K] }
    }

    /// Variable seeded with derivative 1 in lane `lane`.
    #[inline]
    pub fn variable(re: f64, lane: usize) -> Self {
        let mut eps = [0.0; K];
        eps[lane] = 1.0;
        Self { re, eps }
    }
}

impl<const K: usize> PartialEq for Dual<K> {
    fn eq(&self, other: &Self) -> bool {
        self.re == other.re
    }
}

impl<const K: usize> PartialOrd for Dual<K> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        self.re.partial_cmp(&other.re)
    }
}

impl<const K: usize> Add for Dual<K> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        let mut eps = self.eps;
        for (e, r) in eps.iter_mut().zip(rhs.eps.iter()) {
            *e += r;
        }
        Self { re: self.re + rhs.re, eps }
    }
}

impl<const K: usize> Sub for Dual<K> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        let mut eps = self.eps;
        for (e, r) in eps.iter_mut().zip(rhs.eps.iter()) {
            *e -= r;
        }
        Self { re: self.re - rhs.re, eps }
    }
}

impl<const K: usize> Mul for Dual<K> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut eps = [0.0; K];
        for i in 0..K {
            eps[i] = self.eps[i] * rhs.re + self.re * rhs.eps[i];
        }
        Self { re: self.re * rhs.re, eps }
    }
}

impl<const K: usize> Div for Dual<K> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.re;
        let re = self.re * inv;
        let mut eps = [0.0; K];
        for i in 0..K {
            eps[i] = (self.eps[i] - re * rhs.eps[i]) * inv;
        }
        Self { re, eps }
    }
}

impl<const K: usize> Neg for Dual<K> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        let mut eps = self.eps;
        for e in eps.iter_mut() {
            *e = -*e;
        }
        Self { re: -self.re, eps }
    }
}

impl<const K: usize> AddAssign for Dual<K> {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        self.re += rhs.re;
        for (e, r) in self.eps.iter_mut().zip(rhs.eps.iter()) {
            *e += r;
        }
    }
}

impl<const K: usize> SubAssign for Dual<K> {
    #[inline]
    fn sub_assign(&mut self, rhs: Self) {
        self.re -= rhs.re;
        for (e, r) in self.eps.iter_mut().zip(rhs.eps.iter()) {
            *e -= r;
        }
    }
}

impl<const K: usize> Real for Dual<K> {
    #[inline]
    fn from_f64(x: f64) -> Self {
        Self::constant(x)
    }

    #[inline]
    fn value(self) -> f64 {
        self.re
    }

    #[inline]
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        let d = 0.5 / s;
        let mut eps = self.eps;
        for e in eps.iter_mut() {
            *e *= d;
        }
        Self { re: s, eps }
    }

    #[inline]
    fn sin(self) -> Self {
        let (s, c) = self.re.sin_cos();
        let mut eps = self.eps;
        for e in eps.iter_mut() {
            *e *= c;
        }
        Self { re: s, eps }
    }

    #[inline]
    fn cos(self) -> Self {
        let (s, c) = self.re.sin_cos();
        let mut eps = self.eps;
        for e in eps.iter_mut() {
            *e *= -s;
        }
        Self { re: c, eps }
    }

    #[inline]
    fn atan2(self, x: Self) -> Self {
        let re = self.re.atan2(x.re);
        let denom = self.re * self.re + x.re * x.re;
        let mut eps = [0.0; K];
        for i in 0..K {
            eps[i] = (x.re * self.eps[i] - self.re * x.eps[i]) / denom;
        }
        Self { re, eps }
    }
}
