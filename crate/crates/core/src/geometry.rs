//! Shared geometric primitives: rigid transforms, oriented boxes and angle helpers.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

/// Tolerance used when checking that a matrix is a proper rotation.
pub const RIGID_TOLERANCE: f64 = 1e-9;

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(theta: f64) -> f64 {
    let mut a = theta % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Wraps an angle in degrees into `[0, 360)`.
pub fn normalize_degrees_360(deg: f64) -> f64 {
    let a = deg.rem_euclid(360.0);
    // rem_euclid may return exactly 360.0 for tiny negative inputs
    if a >= 360.0 {
        0.0
    } else {
        a
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("matrix is not a rigid transform: {0}")]
    NotRigid(String),
    #[error("invalid box: {0}")]
    InvalidBox(String),
}

/// Object category shared by the scene generator, detectors and the onboard view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Vehicle,
    Pedestrian,
}

impl ObjectClass {
    pub fn as_u8(self) -> u8 {
        match self {
            ObjectClass::Vehicle => 0,
            ObjectClass::Pedestrian => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(ObjectClass::Vehicle),
            1 => Some(ObjectClass::Pedestrian),
            _ => None,
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectClass::Vehicle => f.write_str("vehicle"),
            ObjectClass::Pedestrian => f.write_str("pedestrian"),
        }
    }
}

/// A 4×4 homogeneous transform with an orthonormal, right-handed rotation block.
///
/// Construction through [`RigidTransform::from_matrix`] validates the matrix;
/// the other constructors produce rigid transforms by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    m: Matrix4<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            m: Matrix4::identity(),
        }
    }

    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self, GeometryError> {
        check_rigid(&m)?;
        Ok(Self { m })
    }

    /// Builds a transform from a rotation and translation without checks beyond
    /// those implied by `Rotation3`.
    pub fn from_parts(rotation: &Rotation3<f64>, translation: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self { m }
    }

    pub fn from_rotation_translation(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self::from_matrix(m)
    }

    pub fn translation(t: Vector3<f64>) -> Self {
        Self::from_parts(&Rotation3::identity(), t)
    }

    /// Rotation `Rz(yaw) · Ry(pitch) · Rx(roll)` followed by a translation.
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64, translation: Vector3<f64>) -> Self {
        Self::from_parts(&Rotation3::from_euler_angles(roll, pitch, yaw), translation)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.m
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.m.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        self.m.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Rigid inverse: transposed rotation and negated rotated translation.
    pub fn inverse(&self) -> Self {
        let rt = self.rotation().transpose();
        let t = -(rt * self.translation_vector());
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self { m }
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            m: self.m * other.m,
        }
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation_vector()
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * v
    }

    /// Heading (about +z) picked up by a vector initially along +x.
    pub fn yaw(&self) -> f64 {
        let r = self.rotation();
        r[(1, 0)].atan2(r[(0, 0)])
    }

    pub fn is_rigid(&self) -> bool {
        check_rigid(&self.m).is_ok()
    }
}

fn check_rigid(m: &Matrix4<f64>) -> Result<(), GeometryError> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NotRigid("non-finite entry".into()));
    }
    let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
    if bottom != [0.0, 0.0, 0.0, 1.0] {
        return Err(GeometryError::NotRigid(format!(
            "bottom row is {bottom:?}, expected [0, 0, 0, 1]"
        )));
    }
    let r = m.fixed_view::<3, 3>(0, 0).into_owned();
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if err > RIGID_TOLERANCE {
        return Err(GeometryError::NotRigid(format!(
            "rotation block not orthonormal (max |RᵀR - I| = {err:e})"
        )));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > RIGID_TOLERANCE {
        return Err(GeometryError::NotRigid(format!("determinant {det} != +1")));
    }
    Ok(())
}

/// Seven-parameter box: center, footprint width and length, height, heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub theta: f64,
}

impl OrientedBox3D {
    /// Validated constructor; `theta` is normalized into `(-π, π]`.
    pub fn new(
        x: f64,
        y: f64,
        z: f64,
        w: f64,
        l: f64,
        h: f64,
        theta: f64,
    ) -> Result<Self, GeometryError> {
        let b = Self {
            x,
            y,
            z,
            w,
            l,
            h,
            theta: normalize_angle(theta),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let all = [self.x, self.y, self.z, self.w, self.l, self.h, self.theta];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidBox("non-finite field".into()));
        }
        if !(self.w > 0.0 && self.l > 0.0 && self.h > 0.0) {
            return Err(GeometryError::InvalidBox(format!(
                "dims must be positive, got w={} l={} h={}",
                self.w, self.l, self.h
            )));
        }
        if !(self.theta > -PI && self.theta <= PI) {
            return Err(GeometryError::InvalidBox(format!(
                "theta {} outside (-π, π]",
                self.theta
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    /// Re-expresses the box in another frame. Heading follows the image of the
    /// box's length axis projected onto the target xy plane.
    pub fn transformed(&self, t: &RigidTransform) -> Self {
        let c = t.apply_point(&self.center());
        let axis = t.apply_vector(&Vector3::new(self.theta.cos(), self.theta.sin(), 0.0));
        Self {
            x: c.x,
            y: c.y,
            z: c.z,
            theta: normalize_angle(axis.y.atan2(axis.x)),
            ..*self
        }
    }

    pub fn ground_distance(&self, other: &OrientedBox3D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}
