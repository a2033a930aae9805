//! Rigid transforms and SO(3) helpers shared by every stage of the pipeline.

use std::ops::Mul;

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

/// Tolerance used when validating rotations that arrive from outside the process.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// A proper rigid motion: `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TransformRepr", into = "TransformRepr")]
pub struct RigidTransform {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(Rotation3::identity(), translation)
    }

    pub fn from_rotation(rotation: Rotation3<f64>) -> Self {
        Self::new(rotation, Vector3::zeros())
    }

    /// Builds a transform from URDF-style `xyz` and fixed-axis `rpy`.
    pub fn from_xyz_rpy(xyz: [f64; 3], rpy: [f64; 3]) -> Self {
        Self::new(
            Rotation3::from_euler_angles(rpy[0], rpy[1], rpy[2]),
            Vector3::from(xyz),
        )
    }

    pub fn inverse(&self) -> Self {
        let rotation = self.rotation.inverse();
        Self::new(rotation, -(rotation * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Projects the rotation back onto SO(3).
    pub fn orthonormalized(&self) -> Self {
        Self::new(orthonormalize(self.rotation.matrix()), self.translation)
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.matrix().iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
    }

    /// `‖RᵀR − I‖_F`, zero for an exact rotation.
    pub fn orthonormality_error(&self) -> f64 {
        orthonormality_error(self.rotation.matrix())
    }

    /// Geodesic rotation distance and Euclidean translation distance.
    pub fn distance_to(&self, other: &Self) -> (f64, f64) {
        (
            geodesic_distance(&self.rotation, &other.rotation),
            (self.translation - other.translation).norm(),
        )
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation * rhs.rotation,
            self.rotation * rhs.translation + self.translation,
        )
    }
}

impl Mul<&RigidTransform> for &RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: &RigidTransform) -> RigidTransform {
        *self * *rhs
    }
}

/// Row-major wire representation.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TransformRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl From<RigidTransform> for TransformRepr {
    fn from(t: RigidTransform) -> Self {
        let m = t.rotation.matrix();
        let mut rotation = [[0.0; 3]; 3];
        for (r, row) in rotation.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = m[(r, c)];
            }
        }
        Self {
            rotation,
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl TryFrom<TransformRepr> for RigidTransform {
    type Error = String;

    fn try_from(repr: TransformRepr) -> Result<Self, Self::Error> {
        let m = Matrix3::from_fn(|r, c| repr.rotation[r][c]);
        if !m.iter().chain(repr.translation.iter()).all(|v| v.is_finite()) {
            return Err("transform contains non-finite values".into());
        }
        if orthonormality_error(&m) > ROTATION_TOLERANCE || m.determinant() <= 0.0 {
            return Err("rotation is not a proper orthonormal matrix".into());
        }
        Ok(RigidTransform::new(
            Rotation3::from_matrix_unchecked(m),
            Vector3::from(repr.translation),
        ))
    }
}

pub fn orthonormality_error(m: &Matrix3<f64>) -> f64 {
    (m.transpose() * m - Matrix3::identity()).norm()
}

/// Closest rotation to `m` in the Frobenius sense (polar decomposition).
pub fn orthonormalize(m: &Matrix3<f64>) -> Rotation3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let d = (u * v_t).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t;
    Rotation3::from_matrix_unchecked(r)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation vector (axis · angle) of `r`, accurate near 0 and near π.
pub fn so3_log(r: &Rotation3<f64>) -> Vector3<f64> {
    let m = r.matrix();
    let w = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5;
    let cos = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin = w.norm();
    let angle = sin.atan2(cos);
    if angle < 1e-5 {
        return w * (1.0 + angle * angle / 6.0);
    }
    if cos > -0.9 {
        return w * (angle / sin);
    }
    // Near π the antisymmetric part vanishes; recover the axis from the symmetric part.
    let sym = (m + m.transpose()) * 0.5 - Matrix3::identity() * cos;
    let scale = 1.0 - cos;
    let outer = sym / scale;
    let k = (0..3)
        .max_by(|&a, &b| outer[(a, a)].total_cmp(&outer[(b, b)]))
        .unwrap_or(0);
    let mut axis = outer.column(k).into_owned();
    axis /= axis.norm();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    axis * angle
}

pub fn so3_exp(v: &Vector3<f64>) -> Rotation3<f64> {
    Rotation3::from_scaled_axis(*v)
}

pub fn geodesic_distance(a: &Rotation3<f64>, b: &Rotation3<f64>) -> f64 {
    so3_log(&(a.inverse() * b)).norm()
}

/// Constant-angular-velocity interpolation from `a` (t = 0) to `b` (t = 1).
pub fn slerp(a: &Rotation3<f64>, b: &Rotation3<f64>, t: f64) -> Rotation3<f64> {
    let delta = so3_log(&(b * a.inverse()));
    so3_exp(&(delta * t)) * a
}

pub fn interpolate(a: &RigidTransform, b: &RigidTransform, t: f64) -> RigidTransform {
    RigidTransform::new(
        slerp(&a.rotation, &b.rotation, t),
        a.translation + (b.translation - a.translation) * t,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn log_exp_round_trip_across_angle_range() {
        let axis = Vector3::new(0.3, -0.5, 0.8).normalize();
        for &angle in &[0.0, 1e-9, 1e-4, 0.5, 2.0, 3.0, PI - 1e-7, PI] {
            let r = so3_exp(&(axis * angle));
            let v = so3_log(&r);
            assert_relative_eq!(v.norm(), angle, epsilon = 1e-9);
            if angle > 0.0 && angle < PI {
                assert_relative_eq!(v.normalize(), axis, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn polar_projection_is_nearest_rotation() {
        let r = Rotation3::from_euler_angles(0.2, -0.4, 1.1);
        let perturbed = r.matrix() + Matrix3::repeat(1e-4);
        let fixed = orthonormalize(&perturbed);
        assert!(orthonormality_error(fixed.matrix()) < 1e-12);
        assert!(geodesic_distance(&fixed, &r) < 1e-3);
    }

    #[test]
    fn transform_inverse_composes_to_identity() {
        let t = RigidTransform::from_xyz_rpy([0.1, -0.2, 0.3], [0.4, 0.5, -0.6]);
        let id = t * t.inverse();
        let (rot, trans) = id.distance_to(&RigidTransform::identity());
        assert!(rot < 1e-12 && trans < 1e-12);
    }

    #[test]
    fn serde_round_trip_is_exact() {
        let t = RigidTransform::from_xyz_rpy([0.1, -0.2, 0.3], [0.4, 0.5, -0.6]);
        let json = serde_json::to_string(&t).unwrap();
        let back: RigidTransform = serde_json::from_str(&json).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn non_rotation_rejected_on_deserialize() {
        let json = r#"{"rotation":[[2,0,0],[0,1,0],[0,0,1]],"translation":[0,0,0]}"#;
        assert!(serde_json::from_str::<RigidTransform>(json).is_err());
    }

    #[test]
    fn slerp_half_of_quarter_turn() {
        let a = Rotation3::identity();
        let b = Rotation3::from_axis_angle(&Vector3::z_axis(), PI / 2.0);
        let mid = slerp(&a, &b, 0.5);
        let expected = Rotation3::from_axis_angle(&Vector3::z_axis(), PI / 4.0);
        assert!(geodesic_distance(&mid, &expected) < 1e-12);
    }
}
