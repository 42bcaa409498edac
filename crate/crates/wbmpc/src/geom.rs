//! Small fixed-size vector/matrix/quaternion arithmetic, generic over [`Real`].
//!
//! The dynamics kernels run on these types so they can be instantiated with
//! dual numbers. At the public API boundary everything converts to nalgebra.

use crate::scalar::Real;
use nalgebra::{Matrix3, Vector3};

/// 3-vector over a generic scalar.
#[derive(Clone, Copy, Debug)]
pub struct V3<S>(pub [S; 3]);

/// Row-major 3x3 matrix over a generic scalar.
#[derive(Clone, Copy, Debug)]
pub struct M3<S>(pub [[S; 3]; 3]);

impl<S: Real> V3<S> {
    #[inline]
    pub fn zero() -> Self {
        V3([S::zero(); 3])
    }

    #[inline]
    pub fn from_f64(v: &Vector3<f64>) -> Self {
        V3([S::from_f64(v.x), S::from_f64(v.y), S::from_f64(v.z)])
    }

    #[inline]
    pub fn value(&self) -> Vector3<f64> {
        Vector3::new(self.0[0].value(), self.0[1].value(), self.0[2].value())
    }

    #[inline]
    pub fn add(&self, o: &Self) -> Self {
        V3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }

    #[inline]
    pub fn sub(&self, o: &Self) -> Self {
        V3([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }

    #[inline]
    pub fn neg(&self) -> Self {
        V3([-self.0[0], -self.0[1], -self.0[2]])
    }

    #[inline]
    pub fn scale(&self, s: S) -> Self {
        V3([self.0[0] * s, self.0[1] * s, self.0[2] * s])
    }

    #[inline]
    pub fn dot(&self, o: &Self) -> S {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }

    #[inline]
    pub fn cross(&self, o: &Self) -> Self {
        V3([
            self.0[1] * o.0[2] - self.0[2] * o.0[1],
            self.0[2] * o.0[0] - self.0[0] * o.0[2],
            self.0[0] * o.0[1] - self.0[1] * o.0[0],
        ])
    }

    #[inline]
    pub fn norm_squared(&self) -> S {
        self.dot(self)
    }
}

impl<S: Real> M3<S> {
    #[inline]
    pub fn zero() -> Self {
        M3([[S::zero(); 3]; 3])
    }

    #[inline]
    pub fn identity() -> Self {
        let mut m = Self::zero();
        m.0[0][0] = S::one();
        m.0[1][1] = S::one();
        m.0[2][2] = S::one();
        m
    }

    #[inline]
    pub fn from_f64(m: &Matrix3<f64>) -> Self {
        let mut out = Self::zero();
        for r in 0..3 {
            for c in 0..3 {
                out.0[r][c] = S::from_f64(m[(r, c)]);
            }
        }
        out
    }

    #[inline]
    pub fn value(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.0[r][c].value())
    }

    #[inline]
    pub fn mul_vec(&self, v: &V3<S>) -> V3<S> {
        V3([
            self.0[0][0] * v.0[0] + self.0[0][1] * v.0[1] + self.0[0][2] * v.0[2],
            self.0[1][0] * v.0[0] + self.0[1][1] * v.0[1] + self.0[1][2] * v.0[2],
            self.0[2][0] * v.0[0] + self.0[2][1] * v.0[1] + self.0[2][2] * v.0[2],
        ])
    }

    /// `self^T * v`.
    #[inline]
    pub fn tr_mul_vec(&self, v: &V3<S>) -> V3<S> {
        V3([
            self.0[0][0] * v.0[0] + self.0[1][0] * v.0[1] + self.0[2][0] * v.0[2],
            self.0[0][1] * v.0[0] + self.0[1][1] * v.0[1] + self.0[2][1] * v.0[2],
            self.0[0][2] * v.0[0] + self.0[1][2] * v.0[1] + self.0[2][2] * v.0[2],
        ])
    }

    #[inline]
    pub fn mul_mat(&self, o: &Self) -> Self {
        let mut out = Self::zero();
        for r in 0..3 {
            for c in 0..3 {
                out.0[r][c] = self.0[r][0] * o.0[0][c] + self.0[r][1] * o.0[1][c] + self.0[r][2] * o.0[2][c];
            }
        }
        out
    }

    #[inline]
    pub fn transpose(&self) -> Self {
        let mut out = Self::zero();
        for r in 0..3 {
            for c in 0..3 {
                out.0[r][c] = self.0[c][r];
            }
        }
        out
    }

    #[inline]
    pub fn add(&self, o: &Self) -> Self {
        let mut out = *self;
        for r in 0..3 {
            for c in 0..3 {
                out.0[r][c] += o.0[r][c];
            }
        }
        out
    }

    #[inline]
    pub fn sub(&self, o: &Self) -> Self {
        let mut out = *self;
        for r in 0..3 {
            for c in 0..3 {
                out.0[r][c] -= o.0[r][c];
            }
        }
        out
    }

    #[inline]
    pub fn scale(&self, s: S) -> Self {
        let mut out = *self;
        for r in 0..3 {
            for c in 0..3 {
                out.0[r][c] = out.0[r][c] * s;
            }
        }
        out
    }

    /// Skew-symmetric matrix such that `skew(a) * b = a x b`.
    #[inline]
    pub fn skew(v: &V3<S>) -> Self {
        let z = S::zero();
        M3([
            [z, -v.0[2], v.0[1]],
            [v.0[2], z, -v.0[0]],
            [-v.0[1], v.0[0], z],
        ])
    }

    /// `a * b^T`.
    #[inline]
    pub fn outer(a: &V3<S>, b: &V3<S>) -> Self {
        let mut out = Self::zero();
        for r in 0..3 {
            for c in 0..3 {
                out.0[r][c] = a.0[r] * b.0[c];
            }
        }
        out
    }
}

/// Unit quaternion stored as `[w, x, y, z]`.
#[derive(Clone, Copy, Debug)]
pub struct Quat<S>(pub [S; 4]);

impl<S: Real> Quat<S> {
    #[inline]
    pub fn identity() -> Self {
        Quat([S::one(), S::zero(), S::zero(), S::zero()])
    }

    #[inline]
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat([S::from_f64(w), S::from_f64(x), S::from_f64(y), S::from_f64(z)])
    }

    #[inline]
    pub fn value_wxyz(&self) -> [f64; 4] {
        [self.0[0].value(), self.0[1].value(), self.0[2].value(), self.0[3].value()]
    }

    /// Hamilton product `self * rhs`.
    pub fn mul(&self, r: &Self) -> Self {
        let [w1, x1, y1, z1] = self.0;
        let [w2, x2, y2, z2] = r.0;
        Quat([
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ])
    }

    #[inline]
    pub fn conjugate(&self) -> Self {
        Quat([self.0[0], -self.0[1], -self.0[2], -self.0[3]])
    }

    pub fn normalize(&self) -> Self {
        let n = (self.0[0] * self.0[0]
            + self.0[1] * self.0[1]
            + self.0[2] * self.0[2]
            + self.0[3] * self.0[3])
            .sqrt();
        Quat([self.0[0] / n, self.0[1] / n, self.0[2] / n, self.0[3] / n])
    }

    /// Rotation matrix of the unit quaternion (body-to-world for a base pose).
    pub fn to_matrix(&self) -> M3<S> {
        let [w, x, y, z] = self.0;
        let two = S::from_f64(2.0);
        let one = S::one();
        M3([
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

    /// Exponential map: rotation vector -> unit quaternion.
    ///
    /// Uses a Taylor series near zero so dual-number derivatives stay exact.
    pub fn exp(v: &V3<S>) -> Self {
        let t2 = v.norm_squared();
        let half = S::from_f64(0.5);
        if t2.value() < 1e-14 {
            // sin(t/2)/t = 1/2 - t^2/48 + t^4/3840
            let c48 = S::from_f64(1.0 / 48.0);
            let s_over_t = half - t2 * c48;
            // cos(t/2) = 1 - t^2/8 + t^4/384
            let w = S::one() - t2 * S::from_f64(0.125);
            Quat([w, v.0[0] * s_over_t, v.0[1] * s_over_t, v.0[2] * s_over_t])
        } else {
            let t = t2.sqrt();
            let w = (t * half).cos();
            let s_over_t = (t * half).sin() / t;
            Quat([w, v.0[0] * s_over_t, v.0[1] * s_over_t, v.0[2] * s_over_t])
        }
    }

    /// Logarithm map: unit quaternion -> rotation vector (shortest path).
    pub fn log(&self) -> V3<S> {
        // Flip sign so w >= 0; both quaternions represent the same rotation.
        let q = if self.0[0].value() < 0.0 {
            Quat([-self.0[0], -self.0[1], -self.0[2], -self.0[3]])
        } else {
            *self
        };
        let vec = V3([q.0[1], q.0[2], q.0[3]]);
        let s2 = vec.norm_squared();
        let w = q.0[0];
        if s2.value() < 1e-14 {
            // 2*atan2(s, w)/s = 2/w * (1 - s^2/(3 w^2))
            let two = S::from_f64(2.0);
            let third = S::from_f64(1.0 / 3.0);
            let f = two / w * (S::one() - s2 * third / (w * w));
            vec.scale(f)
        } else {
            let s = s2.sqrt();
            let angle = S::from_f64(2.0) * s.atan2(w);
            vec.scale(angle / s)
        }
    }
}
