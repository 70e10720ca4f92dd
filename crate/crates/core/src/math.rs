//! Quaternion type and small numeric helpers.
//!
//! Quaternions are stored as (w, x, y, z) and are not kept normalized in
//! storage; consumers normalize before converting to a rotation matrix so
//! that gradient updates can move freely through R⁴.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let a = axis.normalize();
        let (s, c) = (angle * 0.5).sin_cos();
        Self {
            w: c,
            x: a.x * s,
            y: a.y * s,
            z: a.z * s,
        }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Quat {
        let n = self.norm();
        Quat {
            w: self.w / n,
            x: self.x / n,
            y: self.y / n,
            z: self.z / n,
        }
    }

    pub fn dot(&self, other: &Quat) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn neg(&self) -> Quat {
        Quat {
            w: -self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Rotation matrix of the quaternion. Assumes unit norm.
    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
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

    /// Partial derivatives of the rotation matrix with respect to the four
    /// (unit) quaternion components, in (w, x, y, z) order.
    pub fn rotation_matrix_jacobian(&self) -> [Matrix3<f64>; 4] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        let dw = Matrix3::new(
            0.0,
            -2.0 * z,
            2.0 * y,
            2.0 * z,
            0.0,
            -2.0 * x,
            -2.0 * y,
            2.0 * x,
            0.0,
        );
        let dx = Matrix3::new(
            0.0,
            2.0 * y,
            2.0 * z,
            2.0 * y,
            -4.0 * x,
            -2.0 * w,
            2.0 * z,
            2.0 * w,
            -4.0 * x,
        );
        let dy = Matrix3::new(
            -4.0 * y,
            2.0 * x,
            2.0 * w,
            2.0 * x,
            0.0,
            2.0 * z,
            -2.0 * w,
            2.0 * z,
            -4.0 * y,
        );
        let dz = Matrix3::new(
            -4.0 * z,
            -2.0 * w,
            2.0 * x,
            2.0 * w,
            -4.0 * z,
            2.0 * y,
            2.0 * x,
            2.0 * y,
            0.0,
        );
        [dw, dx, dy, dz]
    }

    /// Unit quaternion of a rotation matrix (Shepperd's method).
    pub fn from_rotation_matrix(m: &Matrix3<f64>) -> Quat {
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Quat {
                w: 0.25 * s,
                x: (m[(2, 1)] - m[(1, 2)]) / s,
                y: (m[(0, 2)] - m[(2, 0)]) / s,
                z: (m[(1, 0)] - m[(0, 1)]) / s,
            }
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Quat {
                w: (m[(2, 1)] - m[(1, 2)]) / s,
                x: 0.25 * s,
                y: (m[(0, 1)] + m[(1, 0)]) / s,
                z: (m[(0, 2)] + m[(2, 0)]) / s,
            }
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Quat {
                w: (m[(0, 2)] - m[(2, 0)]) / s,
                x: (m[(0, 1)] + m[(1, 0)]) / s,
                y: 0.25 * s,
                z: (m[(1, 2)] + m[(2, 1)]) / s,
            }
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Quat {
                w: (m[(1, 0)] - m[(0, 1)]) / s,
                x: (m[(0, 2)] + m[(2, 0)]) / s,
                y: (m[(1, 2)] + m[(2, 1)]) / s,
                z: 0.25 * s,
            }
        };
        q.normalized()
    }

    /// Spherical linear interpolation between two unit quaternions; takes
    /// the shorter arc and falls back to normalized lerp when the inputs are
    /// nearly parallel.
    pub fn slerp(&self, other: &Quat, u: f64) -> Quat {
        let mut b = *other;
        let mut d = self.dot(&b);
        if d < 0.0 {
            b = b.neg();
            d = -d;
        }
        if d > 1.0 - 1e-10 {
            return Quat {
                w: self.w + u * (b.w - self.w),
                x: self.x + u * (b.x - self.x),
                y: self.y + u * (b.y - self.y),
                z: self.z + u * (b.z - self.z),
            }
            .normalized();
        }
        let theta = d.clamp(-1.0, 1.0).acos();
        let sin_theta = theta.sin();
        let wa = ((1.0 - u) * theta).sin() / sin_theta;
        let wb = (u * theta).sin() / sin_theta;
        Quat {
            w: wa * self.w + wb * b.w,
            x: wa * self.x + wb * b.x,
            y: wa * self.y + wb * b.y,
            z: wa * self.z + wb * b.z,
        }
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

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// FNV-1a 64-bit hash, used for config fingerprints and bit-wise
/// reproducibility digests in tests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 step, used to derive independent per-iteration RNG seeds from
/// a base seed.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn identity_quat_gives_identity_matrix() {
        let r = Quat::IDENTITY.to_rotation_matrix();
        assert_relative_eq!(r, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn z_rotation_matrix() {
        let q = Quat::from_axis_angle(Vector3::z(), FRAC_PI_2);
        let r = q.to_rotation_matrix();
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(r, expected, epsilon = 1e-12);
    }

    #[test]
    fn rotation_jacobian_matches_finite_differences() {
        let q = Quat::new(0.9, 0.2, -0.3, 0.1).normalized();
        let jac = q.rotation_matrix_jacobian();
        let h = 1e-6;
        for (k, dk) in jac.iter().enumerate() {
            let mut qp = q;
            let mut qm = q;
            match k {
                0 => {
                    qp.w += h;
                    qm.w -= h;
                }
                1 => {
                    qp.x += h;
                    qm.x -= h;
                }
                2 => {
                    qp.y += h;
                    qm.y -= h;
                }
                _ => {
                    qp.z += h;
                    qm.z -= h;
                }
            }
            let fd = (qp.to_rotation_matrix() - qm.to_rotation_matrix()) / (2.0 * h);
            assert_relative_eq!(*dk, fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn slerp_endpoints_and_midpoint() {
        let a = Quat::from_axis_angle(Vector3::z(), 0.0);
        let b = Quat::from_axis_angle(Vector3::z(), FRAC_PI_2);
        let m = a.slerp(&b, 0.5);
        let expected = Quat::from_axis_angle(Vector3::z(), FRAC_PI_2 / 2.0);
        assert_relative_eq!(m.w, expected.w, epsilon = 1e-12);
        assert_relative_eq!(m.z, expected.z, epsilon = 1e-12);
        let e0 = a.slerp(&b, 0.0);
        assert_relative_eq!(e0.dot(&a).abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn matrix_quat_roundtrip() {
        let q = Quat::new(-0.3, 0.8, 0.1, -0.5).normalized();
        let back = Quat::from_rotation_matrix(&q.to_rotation_matrix());
        // Recovered up to sign.
        assert_relative_eq!(back.dot(&q).abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn sigmoid_logit_roundtrip() {
        for &p in &[0.01, 0.1, 0.5, 0.9, 0.99] {
            assert_relative_eq!(sigmoid(logit(p)), p, epsilon = 1e-12);
        }
    }
}
