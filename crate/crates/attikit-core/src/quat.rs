//! Scalar-first unit quaternions and their kinematics.
//!
//! Convention: `q = [q0, q1, q2, q3]` with `q0 = cos(θ/2)`, Hamilton product,
//! body rates multiplied on the right (`q̇ = ½ q ⊗ [0, ω]`), which in matrix
//! form is `q̇ = ½ Ω[ω] q`. Quaternions are kept canonical with `q0 ≥ 0`.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

/// Unit quaternion, scalar first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub q0: f64,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        q0: 1.0,
        q1: 0.0,
        q2: 0.0,
        q3: 0.0,
    };

    pub fn new(q0: f64, q1: f64, q2: f64, q3: f64) -> Self {
        Quaternion { q0, q1, q2, q3 }
    }

    /// Rotation of `angle` radians about the (not necessarily unit) `axis`.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Quaternion::IDENTITY;
        }
        let half = 0.5 * angle;
        let s = half.sin() / n;
        Quaternion::new(half.cos(), s * axis.x, s * axis.y, s * axis.z)
            .normalized()
            .canonicalized()
    }

    pub fn from_vector(v: Vector4<f64>) -> Self {
        Quaternion::new(v[0], v[1], v[2], v[3])
    }

    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.q0, self.q1, self.q2, self.q3)
    }

    /// Vector (imaginary) part `[q1, q2, q3]`.
    pub fn vector_part(&self) -> Vector3<f64> {
        Vector3::new(self.q1, self.q2, self.q3)
    }

    pub fn norm(&self) -> f64 {
        (self.q0 * self.q0 + self.q1 * self.q1 + self.q2 * self.q2 + self.q3 * self.q3).sqrt()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        Quaternion::new(self.q0 / n, self.q1 / n, self.q2 / n, self.q3 / n)
    }

    /// Flips the sign so `q0 ≥ 0`; both signs encode the same rotation.
    pub fn canonicalized(&self) -> Self {
        if self.q0 < 0.0 {
            Quaternion::new(-self.q0, -self.q1, -self.q2, -self.q3)
        } else {
            *self
        }
    }

    pub fn conjugate(&self) -> Self {
        Quaternion::new(self.q0, -self.q1, -self.q2, -self.q3)
    }

    /// Hamilton product `self ⊗ rhs`.
    pub fn mul(&self, rhs: &Quaternion) -> Quaternion {
        let (a0, a) = (self.q0, self.vector_part());
        let (b0, b) = (rhs.q0, rhs.vector_part());
        let s = a0 * b0 - a.dot(&b);
        let v = a0 * b + b0 * a + a.cross(&b);
        Quaternion::new(s, v.x, v.y, v.z)
    }

    /// Error quaternion taking `target` to `self` (`target⁻¹ ⊗ self`),
    /// canonicalized.
    pub fn error_from(&self, target: &Quaternion) -> Quaternion {
        target.conjugate().mul(self).normalized().canonicalized()
    }

    /// Rotation matrix `R` with `v_inertial = R v_body`.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.q0, self.q1, self.q2, self.q3);
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

    /// Maps an inertial-frame vector into the body frame.
    pub fn inertial_to_body(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix().transpose() * v
    }

    pub fn is_finite(&self) -> bool {
        self.q0.is_finite() && self.q1.is_finite() && self.q2.is_finite() && self.q3.is_finite()
    }
}

/// The 4×4 rate matrix `Ω[ω]` that drives quaternion kinematics.
///
/// `Ω` is antisymmetric, so `⟨q, Ω q⟩ = 0` and quaternion norm is preserved
/// by the exact flow.
pub fn omega_matrix(omega: &Vector3<f64>) -> Matrix4<f64> {
    let (w1, w2, w3) = (omega.x, omega.y, omega.z);
    Matrix4::new(
        0.0, -w1, -w2, -w3, //
        w1, 0.0, w3, -w2, //
        w2, -w3, 0.0, w1, //
        w3, w2, -w1, 0.0,
    )
}

/// Quaternion kinematics `q̇ = ½ Ω[ω] q`.
pub fn quat_deriv(q: &Quaternion, omega: &Vector3<f64>) -> Vector4<f64> {
    0.5 * omega_matrix(omega) * q.as_vector()
}

/// Pointing error of `q` relative to the identity attitude, in degrees:
/// `2·arccos(q0)` with `q0` canonicalized to be non-negative.
pub fn attitude_error_deg(q: &Quaternion) -> f64 {
    let q0 = q.canonicalized().q0.clamp(-1.0, 1.0);
    2.0 * q0.acos() * 180.0 / core::f64::consts::PI
}
