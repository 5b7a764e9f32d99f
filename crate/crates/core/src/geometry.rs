//! Rigid transforms, the pinhole camera, and Gaussian covariance construction.
//!
//! Conventions used throughout the crate:
//! - quaternions are stored w-first and act as Hamilton rotations;
//! - a [`Pose`] maps world points into camera space, `x_cam = R x + t`;
//! - the camera looks down +z, with x to the right and y down;
//! - pixel `(i, j)` has its center at continuous coordinate `(i, j)`.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest camera-space depth accepted by projection.
pub const DEPTH_EPS: f64 = 1e-6;

/// Variance (px²) added to both diagonal entries of every projected covariance.
pub const COV2D_LOW_PASS: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::identity()
    }
}

impl Quaternion {
    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub const fn identity() -> Self {
        Self::new(1.0, 0.0, 0.0, 0.0)
    }

    pub fn from_array(q: [f64; 4]) -> Self {
        Self::new(q[0], q[1], q[2], q[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Returns the unit quaternion; a zero quaternion maps to identity.
    pub fn normalized(&self) -> Self {
        let n = self.norm();
        if n < 1e-300 || !n.is_finite() {
            return Self::identity();
        }
        Self::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn conjugate(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self * rhs` (apply `rhs` first).
    pub fn mul(&self, rhs: &Self) -> Self {
        let (a, b) = (self, rhs);
        Self::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    /// Quaternion of the rotation `exp([omega]x)`.
    pub fn from_axis_angle(omega: &Vector3<f64>) -> Self {
        let theta = omega.norm();
        if theta < 1e-12 {
            // second-order accurate near zero
            return Self::new(1.0, 0.5 * omega.x, 0.5 * omega.y, 0.5 * omega.z).normalized();
        }
        let half = 0.5 * theta;
        let s = half.sin() / theta;
        Self::new(half.cos(), omega.x * s, omega.y * s, omega.z * s)
    }

    pub fn from_rotation_matrix(m: &Matrix3<f64>) -> Self {
        let r = nalgebra::Rotation3::from_matrix_unchecked(*m);
        let q = nalgebra::UnitQuaternion::from_rotation_matrix(&r);
        Self::new(q.w, q.i, q.j, q.k).normalized()
    }

    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_rotmat(self)
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn angle(&self) -> f64 {
        let q = self.normalized();
        let v = (q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
        2.0 * v.atan2(q.w.abs())
    }
}

/// Rotation matrix of `q`, normalizing first.
pub fn quat_to_rotmat(q: &Quaternion) -> Matrix3<f64> {
    let Quaternion { w, x, y, z } = q.normalized();
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

/// Partial derivatives of [`quat_to_rotmat`] with respect to the components of
/// an already-normalized quaternion, in `(w, x, y, z)` order.
pub fn rotmat_partials(q: &Quaternion) -> [Matrix3<f64>; 4] {
    let Quaternion { w, x, y, z } = *q;
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    [dw, dx, dy, dz]
}

/// Chains a gradient taken with respect to a unit quaternion back through
/// normalization of the raw (possibly unnormalized) quaternion.
pub fn normalize_backward(raw: &Quaternion, d_unit: [f64; 4]) -> [f64; 4] {
    let n = raw.norm();
    if n < 1e-300 {
        return [0.0; 4];
    }
    let u = raw.normalized().to_array();
    let dot: f64 = u.iter().zip(d_unit.iter()).map(|(a, b)| a * b).sum();
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = (d_unit[k] - u[k] * dot) / n;
    }
    out
}

/// Skew-symmetric cross-product matrix `[v]x`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rigid transform mapping world points into camera space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Quaternion,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Quaternion, translation: Vector3<f64>) -> Self {
        Self {
            rotation: rotation.normalized(),
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Quaternion::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Quaternion::identity(), t)
    }

    pub fn from_matrix(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self::new(Quaternion::from_rotation_matrix(rotation), translation)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_rotmat(&self.rotation)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        pose_compose(self, other)
    }

    pub fn inverse(&self) -> Pose {
        let r_inv = self.rotation_matrix().transpose();
        Pose::new(self.rotation.conjugate(), -(r_inv * self.translation))
    }

    /// Applies a tangent update on the left: `(exp([ω]x), v) ∘ self`, with
    /// `xi = [ω_x, ω_y, ω_z, v_x, v_y, v_z]`.
    ///
    /// Every pose gradient in the crate is taken with respect to this same
    /// left perturbation, evaluated at `xi = 0`.
    pub fn retract(&self, xi: &[f64; 6]) -> Pose {
        let delta = Pose::new(
            Quaternion::from_axis_angle(&Vector3::new(xi[0], xi[1], xi[2])),
            Vector3::new(xi[3], xi[4], xi[5]),
        );
        delta.compose(self)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.inverse().translation
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.to_array().iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
    }
}

pub fn pose_compose(a: &Pose, b: &Pose) -> Pose {
    Pose::new(
        a.rotation.mul(&b.rotation),
        a.rotation_matrix() * b.translation + a.translation,
    )
}

/// Pinhole intrinsics; image size in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    /// Camera-space direction with unit z through pixel `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

pub fn project(pose: &Pose, k: &Intrinsics, mu: &Vector3<f64>) -> Result<Projection> {
    project_camera_point(k, &pose.transform_point(mu))
}

pub fn project_camera_point(k: &Intrinsics, p: &Vector3<f64>) -> Result<Projection> {
    if !(p.z > DEPTH_EPS) {
        return Err(Error::NonPositiveDepth(p.z));
    }
    Ok(Projection {
        u: k.cx + k.fx * p.x / p.z,
        v: k.cy + k.fy * p.y / p.z,
        depth: p.z,
    })
}

/// World point seen at pixel `(u, v)` with camera-space depth `depth`.
pub fn backproject(pose: &Pose, k: &Intrinsics, pixel: (f64, f64), depth: f64) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::NonPositiveDepth(depth));
    }
    let cam = k.ray(pixel.0, pixel.1) * depth;
    Ok(pose.inverse().transform_point(&cam))
}

/// `Σ = R S Sᵀ Rᵀ` for rotation `r` and per-axis scales `s`.
pub fn covariance_3d(r: &Quaternion, s: &Vector3<f64>) -> Result<Matrix3<f64>> {
    if s.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::NonPositiveScale);
    }
    Ok(covariance_from_parts(&quat_to_rotmat(r), s))
}

pub(crate) fn covariance_from_parts(rot: &Matrix3<f64>, s: &Vector3<f64>) -> Matrix3<f64> {
    let m = rot * Matrix3::from_diagonal(s);
    m * m.transpose()
}

/// Jacobian of the pinhole projection at camera-space point `p`.
pub fn projection_jacobian(k: &Intrinsics, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * p.x * iz2,
        0.0,
        k.fy * iz,
        -k.fy * p.y * iz2,
    )
}

/// Screen-space covariance `J W Σ Wᵀ Jᵀ` plus the low-pass floor.
pub fn covariance_2d(sigma: &Matrix3<f64>, pose: &Pose, k: &Intrinsics, mu: &Vector3<f64>) -> Result<Matrix2<f64>> {
    let p = pose.transform_point(mu);
    if !(p.z > DEPTH_EPS) {
        return Err(Error::NonPositiveDepth(p.z));
    }
    let m = projection_jacobian(k, &p) * pose.rotation_matrix();
    Ok(m * sigma * m.transpose() + Matrix2::identity() * COV2D_LOW_PASS)
}
