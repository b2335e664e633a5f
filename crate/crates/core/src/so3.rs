//! Fixed-size 3-vector, 3x3 matrix and unit-quaternion algebra.
//!
//! Quaternions use the Hamilton convention with scalar-first storage
//! `(w, x, y, z)`. A quaternion `q` maps body-frame vectors into the world
//! frame through [`quat_to_rot`].

use std::ops::{Add, AddAssign, Index, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    /// Canonical basis vector `e_i`, `i` in `0..3`.
    pub fn unit(i: usize) -> Self {
        let mut a = [0.0; 3];
        a[i] = 1.0;
        Vec3::from(a)
    }

    pub fn e3() -> Self {
        Vec3::new(0.0, 0.0, 1.0)
    }

    pub fn dot(&self, other: &Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(&self, other: &Vec3) -> Vec3 {
        Vec3::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    pub fn norm_squared(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn scale(&self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl SubAssign for Vec3 {
    fn sub_assign(&mut self, o: Vec3) {
        *self = *self - o;
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        self.scale(s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        v.scale(self)
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat3 {
    pub m: [[f64; 3]; 3],
}

impl Mat3 {
    pub const fn new(m: [[f64; 3]; 3]) -> Self {
        Mat3 { m }
    }

    pub const fn identity() -> Self {
        Mat3::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn zeros() -> Self {
        Mat3::new([[0.0; 3]; 3])
    }

    pub fn from_cols(c0: Vec3, c1: Vec3, c2: Vec3) -> Self {
        Mat3::new([[c0.x, c1.x, c2.x], [c0.y, c1.y, c2.y], [c0.z, c1.z, c2.z]])
    }

    pub fn col(&self, j: usize) -> Vec3 {
        Vec3::new(self.m[0][j], self.m[1][j], self.m[2][j])
    }

    pub fn transpose(&self) -> Mat3 {
        let mut t = [[0.0; 3]; 3];
        for (i, row) in self.m.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                t[j][i] = *v;
            }
        }
        Mat3::new(t)
    }

    pub fn mul_vec(&self, v: &Vec3) -> Vec3 {
        let r = |i: usize| self.m[i][0] * v.x + self.m[i][1] * v.y + self.m[i][2] * v.z;
        Vec3::new(r(0), r(1), r(2))
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.m[i][k] * o.m[k][j]).sum();
            }
        }
        Mat3::new(out)
    }

    pub fn scale(&self, s: f64) -> Mat3 {
        let mut out = self.m;
        out.iter_mut().flatten().for_each(|v| *v *= s);
        Mat3::new(out)
    }

    pub fn add(&self, o: &Mat3) -> Mat3 {
        let mut out = self.m;
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += o.m[i][j];
            }
        }
        Mat3::new(out)
    }

    pub fn sub(&self, o: &Mat3) -> Mat3 {
        self.add(&o.scale(-1.0))
    }

    pub fn trace(&self) -> f64 {
        self.m[0][0] + self.m[1][1] + self.m[2][2]
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Frobenius distance of `RᵀR` from the identity.
    pub fn orthogonality_error(&self) -> f64 {
        self.transpose().mul_mat(self).sub(&Mat3::identity()).norm()
    }
}

impl Mul for Mat3 {
    type Output = Mat3;
    fn mul(self, o: Mat3) -> Mat3 {
        self.mul_mat(&o)
    }
}

impl Mul<Vec3> for Mat3 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        self.mul_vec(&v)
    }
}

/// Skew-symmetric matrix with `hat(a) * b == a × b`.
pub fn hat(a: Vec3) -> Mat3 {
    Mat3::new([[0.0, -a.z, a.y], [a.z, 0.0, -a.x], [-a.y, a.x, 0.0]])
}

/// Inverse of [`hat`] for a skew-symmetric matrix (uses the antisymmetric part).
pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(
        0.5 * (m.m[2][1] - m.m[1][2]),
        0.5 * (m.m[0][2] - m.m[2][0]),
        0.5 * (m.m[1][0] - m.m[0][1]),
    )
}

/// Matrix exponential of `hat(w)` by Rodrigues' formula.
pub fn so3_exp(w: Vec3) -> Mat3 {
    let theta = w.norm();
    let k = hat(w);
    let k2 = k.mul_mat(&k);
    if theta < 1e-12 {
        return Mat3::identity().add(&k).add(&k2.scale(0.5));
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Mat3::identity().add(&k.scale(a)).add(&k2.scale(b))
}

/// Quaternion `(w, x, y, z)`. Values produced by the algebra in this module
/// are unit-norm; raw network outputs stored in this type may not be.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitQuat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for UnitQuat {
    fn default() -> Self {
        UnitQuat::identity()
    }
}

impl UnitQuat {
    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        UnitQuat { w, x, y, z }
    }

    pub const fn identity() -> Self {
        UnitQuat::new(1.0, 0.0, 0.0, 0.0)
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        UnitQuat::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn vector(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, o: &UnitQuat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn normalized(&self) -> UnitQuat {
        let n = self.norm();
        UnitQuat::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn neg(&self) -> UnitQuat {
        UnitQuat::new(-self.w, -self.x, -self.y, -self.z)
    }

    pub fn conjugate(&self) -> UnitQuat {
        UnitQuat::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Unit quaternion of the rotation vector `r` (angle `|r|` about `r/|r|`).
    /// `quat_to_rot(from_rotation_vector(r)) == so3_exp(r)`.
    pub fn from_rotation_vector(r: Vec3) -> UnitQuat {
        let theta = r.norm();
        let half = 0.5 * theta;
        // sin(θ/2)/θ, with its Taylor expansion near zero.
        let s = if theta < 1e-8 {
            0.5 - theta * theta / 48.0
        } else {
            half.sin() / theta
        };
        UnitQuat::new(half.cos(), r.x * s, r.y * s, r.z * s)
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Hamilton product `a ⊗ b`.
pub fn quat_mul(a: UnitQuat, b: UnitQuat) -> UnitQuat {
    UnitQuat::new(
        a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
        a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
        a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
    )
}

/// Inverse of a normalized quaternion (its conjugate).
pub fn quat_inv(q: UnitQuat) -> UnitQuat {
    q.conjugate()
}

pub fn quat_to_rot(q: UnitQuat) -> Mat3 {
    let UnitQuat { w, x, y, z } = q;
    Mat3::new([
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ])
}

/// Shepperd's method; the result lies in the `w >= 0` hemisphere.
pub fn rot_to_quat(r: &Mat3) -> Result<UnitQuat> {
    let deviation = r.orthogonality_error();
    if !(deviation <= 1e-6) {
        return Err(Error::NotRotation { deviation });
    }
    let m = &r.m;
    let t = r.trace();
    let diag = [m[0][0], m[1][1], m[2][2]];
    // Pick the largest of (trace, m00, m11, m22) as the pivot.
    let (pivot, _) = [t, diag[0], diag[1], diag[2]]
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        });
    let q = match pivot {
        0 => {
            let s = 2.0 * (1.0 + t).sqrt();
            UnitQuat::new(
                0.25 * s,
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
            )
        }
        1 => {
            let s = 2.0 * (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt();
            UnitQuat::new(
                (m[2][1] - m[1][2]) / s,
                0.25 * s,
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
            )
        }
        2 => {
            let s = 2.0 * (1.0 - m[0][0] + m[1][1] - m[2][2]).sqrt();
            UnitQuat::new(
                (m[0][2] - m[2][0]) / s,
                (m[0][1] + m[1][0]) / s,
                0.25 * s,
                (m[1][2] + m[2][1]) / s,
            )
        }
        _ => {
            let s = 2.0 * (1.0 - m[0][0] - m[1][1] + m[2][2]).sqrt();
            UnitQuat::new(
                (m[1][0] - m[0][1]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                0.25 * s,
            )
        }
    };
    let q = q.normalized();
    Ok(if q.w < 0.0 { q.neg() } else { q })
}

/// Quaternion error `q1 ⊗ q2⁻¹ − q_id`, as a 4-vector `(w, x, y, z)`.
///
/// `q1` may be unnormalized (raw network output); `q2` must be normalized.
/// Not invariant under `q ↦ −q`.
pub fn quat_error(q1: UnitQuat, q2: UnitQuat) -> [f64; 4] {
    let d = quat_mul(q1, quat_inv(q2));
    [d.w - 1.0, d.x, d.y, d.z]
}

pub fn norm4(v: &[f64; 4]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}
