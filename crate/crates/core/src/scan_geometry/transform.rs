use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

use super::Point;

const ORTHO_TOL: f64 = 1e-9;

/// Proper rigid motion `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validates orthonormality and `det = +1` to within 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::arg("rigid transform has non-finite entries"));
        }
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        if gram.amax() > ORTHO_TOL {
            return Err(Error::arg(format!(
                "rotation is not orthonormal (max |RᵀR − I| = {:.3e})",
                gram.amax()
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::arg(format!("rotation determinant {det} is not +1")));
        }
        Ok(RigidTransform {
            rotation,
            translation,
        })
    }

    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation about +z by `yaw` radians followed by translation `t`.
    pub fn from_yaw(yaw: f64, t: Vector3<f64>) -> Self {
        let (s, c) = yaw.sin_cos();
        let rotation = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        RigidTransform {
            rotation,
            translation: t,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply_vec(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v + self.translation
    }

    pub fn apply(&self, p: &Point) -> Point {
        let v = self.apply_vec(&p.position());
        Point {
            x: v.x,
            y: v.y,
            z: v.z,
            reflectivity: p.reflectivity,
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle in radians.
    pub fn rotation_angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

/// Sensor pose in the world frame at `timestamp`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    pub timestamp: f64,
}

impl Pose {
    /// Builds a pose from raw quaternion components.
    ///
    /// Components within 1e-12 of unit norm are kept verbatim, others are
    /// renormalized; norms off by more than 1e-3 are rejected as corrupt.
    pub fn from_components(timestamp: f64, t: [f64; 3], q_xyzw: [f64; 4]) -> Result<Self> {
        if !t.iter().chain(q_xyzw.iter()).all(|v| v.is_finite()) || !timestamp.is_finite() {
            return Err(Error::arg("pose has non-finite components"));
        }
        let q = Quaternion::new(q_xyzw[3], q_xyzw[0], q_xyzw[1], q_xyzw[2]);
        let norm = q.norm();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(Error::arg(format!("quaternion norm {norm} is not unit")));
        }
        let rotation = if (norm - 1.0).abs() <= 1e-12 {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::from_quaternion(q)
        };
        Ok(Pose {
            rotation,
            translation: Vector3::new(t[0], t[1], t[2]),
            timestamp,
        })
    }

    pub fn planar(timestamp: f64, x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Pose {
            rotation: UnitQuaternion::from_euler_angles(0.0, 0.0, yaw),
            translation: Vector3::new(x, y, z),
            timestamp,
        }
    }

    /// Sensor → world transform.
    pub fn to_transform(&self) -> RigidTransform {
        RigidTransform::from_parts_unchecked(
            *self.rotation.to_rotation_matrix().matrix(),
            self.translation,
        )
    }

    pub fn distance(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Transform mapping points in `other`'s sensor frame into `self`'s frame.
    pub fn relative_from(&self, other: &Pose) -> RigidTransform {
        self.to_transform().inverse().compose(&other.to_transform())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_reflection() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(RigidTransform::new(m, Vector3::zeros()).is_err());
        let skew = Matrix3::new(1.0, 1e-6, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(RigidTransform::new(skew, Vector3::zeros()).is_err());
    }

    #[test]
    fn inverse_composes_to_identity() {
        let t = RigidTransform::from_yaw(0.7, Vector3::new(1.0, -2.0, 0.5));
        let id = t.compose(&t.inverse());
        assert!((id.rotation() - Matrix3::identity()).amax() < 1e-12);
        assert!(id.translation().norm() < 1e-12);
    }

    #[test]
    fn relative_pose_maps_between_frames() {
        let a = Pose::planar(0.0, 1.0, 2.0, 0.0, 0.3);
        let b = Pose::planar(1.0, 4.0, -1.0, 0.0, -0.4);
        let p_b = Vector3::new(3.0, 1.0, 0.5);
        let world = b.to_transform().apply_vec(&p_b);
        let p_a = a.relative_from(&b).apply_vec(&p_b);
        assert!((a.to_transform().apply_vec(&p_a) - world).norm() < 1e-12);
    }

    #[test]
    fn pose_quaternion_is_normalized() {
        let p = Pose::from_components(0.0, [0.0; 3], [0.0, 0.0, 0.0, 1.0000004]).unwrap();
        assert!((p.rotation.quaternion().norm() - 1.0).abs() < 1e-9);
        assert!(Pose::from_components(0.0, [0.0; 3], [0.0, 0.0, 0.0, 2.0]).is_err());
    }
}
