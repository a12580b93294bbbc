//! Rigid-body math on SE(3).
//!
//! Twists are ordered `(v, w)`: linear part first, angular part second. Every
//! 6-vector and Jacobian column in this crate follows that ordering. Poses are
//! perturbed on the left, `T <- exp(dxi) * T`.

use nalgebra::{Matrix3, Matrix3x6, Matrix4, Rotation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

/// Angles below this use the second-order Taylor expansion of the
/// exponential map.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Element of se(3).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    /// Linear part (meters).
    pub v: Vector3<f64>,
    /// Angular part (radians).
    pub w: Vector3<f64>,
}

impl Twist {
    pub fn new(v: Vector3<f64>, w: Vector3<f64>) -> Self {
        Self { v, w }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// Builds a twist from a stacked `(v, w)` vector.
    pub fn from_vector(x: &Vector6<f64>) -> Self {
        Self {
            v: Vector3::new(x[0], x[1], x[2]),
            w: Vector3::new(x[3], x[4], x[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.v.x, self.v.y, self.v.z, self.w.x, self.w.y, self.w.z)
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn is_finite(&self) -> bool {
        self.v.iter().chain(self.w.iter()).all(|x| x.is_finite())
    }
}

impl std::ops::Neg for Twist {
    type Output = Twist;
    fn neg(self) -> Twist {
        Twist::new(-self.v, -self.w)
    }
}

/// Skew-symmetric matrix such that `hat(w) * u == w.cross(u)`.
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rigid transform `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    /// Pose from a unit quaternion and a translation.
    pub fn from_quaternion(q: &UnitQuaternion<f64>, t: Vector3<f64>) -> Self {
        Self::new(*q.to_rotation_matrix().matrix(), t)
    }

    /// Pose from roll/pitch/yaw (radians, applied as `Rz(yaw) Ry(pitch) Rx(roll)`).
    pub fn from_rpy(roll: f64, pitch: f64, yaw: f64, t: Vector3<f64>) -> Self {
        Self::new(*Rotation3::from_euler_angles(roll, pitch, yaw).matrix(), t)
    }

    /// Interprets a row-major 4x4 homogeneous matrix.
    pub fn from_matrix4(m: &Matrix4<f64>) -> Self {
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn exp(xi: &Twist) -> Self {
        exp_se3(xi)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3::new(rt, -(rt * self.translation))
    }

    /// Rotation angle in radians, in `[0, pi]`.
    ///
    /// Uses `atan2(|axis|, cos)` so that angles near zero keep full precision.
    pub fn rotation_angle(&self) -> f64 {
        let r = &self.rotation;
        let axis = Vector3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        );
        let sin = 0.5 * axis.norm();
        let cos = 0.5 * (r.trace() - 1.0);
        sin.atan2(cos)
    }

    /// Logarithm map. Only used for metrics and tests.
    pub fn log(&self) -> Twist {
        let rot = Rotation3::from_matrix_unchecked(self.rotation);
        let w = rot.scaled_axis();
        let theta = w.norm();
        let wx = hat(&w);
        let v_inv = if theta < SMALL_ANGLE {
            Matrix3::identity() - 0.5 * wx + wx * wx / 12.0
        } else {
            let half = 0.5 * theta;
            let coef = (1.0 - half * half.cos() / half.sin()) / (theta * theta);
            Matrix3::identity() - 0.5 * wx + coef * wx * wx
        };
        Twist::new(v_inv * self.translation, w)
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    /// Largest deviation of `R^T R` from identity and of `det R` from one.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.rotation.transpose() * self.rotation - Matrix3::identity())
            .abs()
            .max();
        e.max((self.rotation.determinant() - 1.0).abs())
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.rotation
            .iter()
            .chain(self.translation.iter())
            .all(|x| x.is_finite())
            && self.orthonormality_error() <= tol
    }

    /// Projects the rotation block onto SO(3) (nearest rotation in Frobenius norm).
    pub fn orthonormalized(&self) -> PoseSE3 {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut d = Matrix3::identity();
        d[(2, 2)] = (u * vt).determinant().signum();
        PoseSE3::new(u * d * vt, self.translation)
    }
}

impl std::ops::Mul for PoseSE3 {
    type Output = PoseSE3;
    fn mul(self, rhs: PoseSE3) -> PoseSE3 {
        self.compose(&rhs)
    }
}

impl std::ops::Mul<&PoseSE3> for &PoseSE3 {
    type Output = PoseSE3;
    fn mul(self, rhs: &PoseSE3) -> PoseSE3 {
        self.compose(rhs)
    }
}

/// Exponential map se(3) -> SE(3).
pub fn exp_se3(xi: &Twist) -> PoseSE3 {
    let theta = xi.w.norm();
    let wx = hat(&xi.w);
    let wx2 = wx * wx;
    let (a, b, c) = if theta < SMALL_ANGLE {
        (1.0, 0.5, 1.0 / 6.0)
    } else {
        let t2 = theta * theta;
        (
            theta.sin() / theta,
            (1.0 - theta.cos()) / t2,
            (theta - theta.sin()) / (t2 * theta),
        )
    };
    let rotation = Matrix3::identity() + a * wx + b * wx2;
    let left_jacobian = Matrix3::identity() + b * wx + c * wx2;
    PoseSE3::new(rotation, left_jacobian * xi.v)
}

/// Derivative of a transformed point with respect to a left perturbation,
/// `d(exp(dxi) Tp) / d(dxi)` at `dxi = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointJacobian(pub Matrix3x6<f64>);

impl PointJacobian {
    pub fn matrix(&self) -> &Matrix3x6<f64> {
        &self.0
    }
}

/// `[I | -hat(tp)]` where `tp` is the point already expressed in the world frame.
pub fn point_jacobian(tp: &Vector3<f64>) -> PointJacobian {
    let mut m = Matrix3x6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&Matrix3::identity());
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-hat(tp)));
    PointJacobian(m)
}
