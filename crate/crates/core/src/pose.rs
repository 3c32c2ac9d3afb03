//! Camera pose representations: Euler angles, rotation matrices, look-at
//! directions, and additive pose differencing/accumulation.
//!
//! Rotations use the convention `R = Rx(alpha) * Ry(beta) * Rz(gamma)`. The
//! camera looks along its local x-axis, so the look-at direction is the first
//! column of `R`.

use std::f64::consts::PI;
use std::ops::{Add, Sub};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TWO_PI: f64 = 2.0 * PI;

/// Tolerance for accepting a matrix as a rotation.
pub const ORTHONORMAL_TOL: f64 = 1e-6;

/// Threshold on `|R13|` above which the gimbal-lock branch is used.
const GIMBAL_EPS: f64 = 1e-7;

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(x: f64) -> f64 {
    if x > -PI && x <= PI {
        return x;
    }
    let mut a = (x + PI).rem_euclid(TWO_PI) - PI;
    if a <= -PI {
        a += TWO_PI;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EulerAngles {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl EulerAngles {
    pub const fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self { alpha, beta, gamma }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.alpha, self.beta, self.gamma]
    }

    /// Canonical representative with each component in `(-pi, pi]`.
    pub fn normalized(self) -> Self {
        Self::new(
            wrap_angle(self.alpha),
            wrap_angle(self.beta),
            wrap_angle(self.gamma),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.is_finite() && self.beta.is_finite() && self.gamma.is_finite()
    }
}

/// Camera position in voxel units.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn distance(&self, other: &Position) -> f64 {
        (self.to_vector() - other.to_vector()).norm()
    }
}

impl Add for Position {
    type Output = Position;

    fn add(self, o: Position) -> Position {
        Position::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Position {
    type Output = Position;

    fn sub(self, o: Position) -> Position {
        Position::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub position: Position,
    pub orientation: EulerAngles,
}

impl Pose {
    pub const fn new(position: Position, orientation: EulerAngles) -> Self {
        Self {
            position,
            orientation,
        }
    }
}

/// Six-component pose difference: position delta in voxels, Euler angle
/// delta in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DeltaPose {
    pub dp: [f64; 3],
    #[serde(rename = "do")]
    pub d_o: [f64; 3],
}

impl DeltaPose {
    pub const ZERO: DeltaPose = DeltaPose {
        dp: [0.0; 3],
        d_o: [0.0; 3],
    };

    pub const fn new(dp: [f64; 3], d_o: [f64; 3]) -> Self {
        Self { dp, d_o }
    }

    /// Packs as `(dx, dy, dz, dalpha, dbeta, dgamma)`.
    pub fn to_array(self) -> [f64; 6] {
        [
            self.dp[0], self.dp[1], self.dp[2], self.d_o[0], self.d_o[1], self.d_o[2],
        ]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        assert!(v.len() >= 6, "delta pose needs 6 components");
        Self::new([v[0], v[1], v[2]], [v[3], v[4], v[5]])
    }
}

/// A proper rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Validates orthonormality and a positive determinant.
    pub fn try_from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidRotation("non-finite entries".into()));
        }
        let dev = (m * m.transpose() - Matrix3::identity()).amax();
        if dev > ORTHONORMAL_TOL {
            return Err(Error::InvalidRotation(format!(
                "R*R^T deviates from identity by {dev:.3e}"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::InvalidRotation(format!("determinant {det:.6}")));
        }
        Ok(Self(m))
    }

    /// Builds from orthonormal columns (camera x, y, z axes in world frame).
    pub fn from_columns(x: &Vector3<f64>, y: &Vector3<f64>, z: &Vector3<f64>) -> Result<Self> {
        Self::try_from_matrix(Matrix3::from_columns(&[*x, *y, *z]))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Matrix3<f64> {
        self.0
    }

    /// Entry at 1-based `(row, col)`, matching the usual `R_ij` notation.
    pub fn r(&self, row: usize, col: usize) -> f64 {
        self.0[(row - 1, col - 1)]
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    pub fn compose(&self, other: &RotationMatrix) -> RotationMatrix {
        RotationMatrix(self.0 * other.0)
    }

    pub fn transpose(&self) -> RotationMatrix {
        RotationMatrix(self.0.transpose())
    }
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rotation about an arbitrary unit axis (Rodrigues).
pub fn rot_axis(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let k = axis.normalize();
    let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    let (s, c) = angle.sin_cos();
    Matrix3::identity() + kx * s + kx * kx * (1.0 - c)
}

/// `R = Rx(alpha) * Ry(beta) * Rz(gamma)`.
pub fn euler_to_rotation(e: EulerAngles) -> RotationMatrix {
    RotationMatrix(rot_x(e.alpha) * rot_y(e.beta) * rot_z(e.gamma))
}

/// Inverse of [`euler_to_rotation`]. Returns `beta` in `[-pi/2, pi/2]`; in
/// gimbal lock (`|R13|` within 1e-7 of one) `gamma` is fixed to zero.
pub fn rotation_to_euler(r: &RotationMatrix) -> Result<EulerAngles> {
    let r = RotationMatrix::try_from_matrix(r.0)?;
    let r13 = r.r(1, 3).clamp(-1.0, 1.0);
    let beta = r13.asin();
    if r13.abs() > 1.0 - GIMBAL_EPS {
        // With gamma = 0 the second column is (0, cos alpha, sin alpha).
        let alpha = r.r(3, 2).atan2(r.r(2, 2));
        return Ok(EulerAngles::new(alpha, beta, 0.0));
    }
    let gamma = (-r.r(1, 2)).atan2(r.r(1, 1));
    let alpha = (-r.r(2, 3)).atan2(r.r(3, 3));
    Ok(EulerAngles::new(alpha, beta, gamma))
}

/// Default look-at axis of the camera.
pub fn look_axis() -> Vector3<f64> {
    Vector3::x()
}

fn check_unit(u: &Vector3<f64>) -> Result<()> {
    let n = u.norm();
    if !n.is_finite() || (n - 1.0).abs() > 1e-9 {
        return Err(Error::Precondition(format!(
            "direction vector must have unit norm, got {n}"
        )));
    }
    Ok(())
}

/// `R(e) * u`.
pub fn direction_vector(e: EulerAngles, u: &Vector3<f64>) -> Result<Vector3<f64>> {
    check_unit(u)?;
    Ok(euler_to_rotation(e).apply(u))
}

/// Closed form of `R(e) * (1, 0, 0)`.
pub fn look_direction(e: EulerAngles) -> Vector3<f64> {
    let (sa, ca) = e.alpha.sin_cos();
    let (sb, cb) = e.beta.sin_cos();
    let (sg, cg) = e.gamma.sin_cos();
    Vector3::new(cb * cg, sa * sb * cg + ca * sg, -ca * sb * cg + sa * sg)
}

/// Componentwise difference `b - a`, angles wrapped to `(-pi, pi]`.
pub fn delta_pose(a: &Pose, b: &Pose) -> DeltaPose {
    let d = b.position - a.position;
    DeltaPose::new(
        d.to_array(),
        [
            wrap_angle(b.orientation.alpha - a.orientation.alpha),
            wrap_angle(b.orientation.beta - a.orientation.beta),
            wrap_angle(b.orientation.gamma - a.orientation.gamma),
        ],
    )
}

/// `p0 + sum(deltas)` without any angle wrapping.
pub fn accumulate_raw<'a, I>(p0: &Pose, deltas: I) -> Pose
where
    I: IntoIterator<Item = &'a DeltaPose>,
{
    let mut p = p0.position.to_array();
    let mut o = p0.orientation.to_array();
    for d in deltas {
        for k in 0..3 {
            p[k] += d.dp[k];
            o[k] += d.d_o[k];
        }
    }
    Pose::new(Position::from_array(p), EulerAngles::from_array(o))
}

/// `p0 + sum(deltas)` with angles wrapped once at the end.
pub fn accumulate<'a, I>(p0: &Pose, deltas: I) -> Pose
where
    I: IntoIterator<Item = &'a DeltaPose>,
{
    let raw = accumulate_raw(p0, deltas);
    Pose::new(raw.position, raw.orientation.normalized())
}
