//! Rigid-body transforms on SE(3).
//!
//! Rotations are stored as plain 3x3 matrices. Twists are ordered
//! `(v, w)`: translational part first, rotational part second.

use nalgebra::{Matrix3, Matrix4, Rotation3, SymmetricEigen, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this rotation magnitude the exponential uses its Taylor expansion.
const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("direction must be unit length, got norm {0}")]
    NonUnitDirection(f64),
    #[error("alignment needs equal-length sequences, got {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("alignment is degenerate: {0}")]
    AlignmentDegenerate(String),
}

/// Skew-symmetric matrix such that `hat(a) * b = a x b`.
#[rustfmt::skip]
pub fn hat(w: &Vec3) -> Mat3 {
    Mat3::new(
        0.0, -w.z, w.y,
        w.z, 0.0, -w.x,
        -w.y, w.x, 0.0,
    )
}

/// Element of se(3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn new(translation: Vec3, rotation: Vec3) -> Self {
        Twist(Vector6::new(translation.x, translation.y, translation.z, rotation.x, rotation.y, rotation.z))
    }

    pub fn zero() -> Self {
        Twist(Vector6::zeros())
    }

    pub fn translation(&self) -> Vec3 {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn rotation(&self) -> Vec3 {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Neg for Twist {
    type Output = Twist;
    fn neg(self) -> Twist {
        Twist(-self.0)
    }
}

/// Rigid transform `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Pose { rotation, translation }
    }

    pub fn identity() -> Self {
        Pose { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Pose { rotation: Mat3::identity(), translation: t }
    }

    /// Builds a pose from a translation and a quaternion given as
    /// `(x, y, z, w)`. The quaternion is normalized.
    pub fn from_quaternion(t: Vec3, qx: f64, qy: f64, qz: f64, qw: f64) -> Self {
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(qw, qx, qy, qz));
        Pose { rotation: *q.to_rotation_matrix().matrix(), translation: t }
    }

    /// Rotation as a unit quaternion `(x, y, z, w)` with `w >= 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        let rot = Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
        [q.i, q.j, q.k, q.w]
    }

    /// 4x4 homogeneous matrix.
    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Self {
        Pose { rotation: m.fixed_view::<3, 3>(0, 0).into_owned(), translation: m.fixed_view::<3, 1>(0, 3).into_owned() }
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Rotates a unit direction. Translation never affects directions.
    pub fn apply_direction(&self, n: &Vec3) -> Result<Vec3, GeometryError> {
        let norm = n.norm();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(GeometryError::NonUnitDirection(norm));
        }
        Ok(self.rotate(n))
    }

    /// Rotation part only, no unit-norm check.
    #[inline]
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Right-multiplicative local update `self * exp(delta)`.
    pub fn retract(&self, delta: &Twist) -> Pose {
        self.compose(&se3_exp(delta))
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos()
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().chain(self.translation.iter()).all(|x| x.is_finite())
    }

    /// Largest deviation of `R^T R` from identity and of `det R` from one.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.rotation.transpose() * self.rotation - Mat3::identity()).amax();
        e.max((self.rotation.determinant() - 1.0).abs())
    }
}

/// Exponential map from se(3) to SE(3).
pub fn se3_exp(delta: &Twist) -> Pose {
    let v = delta.translation();
    let w = delta.rotation();
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let wx = hat(&w);
    let wx2 = wx * wx;
    let (a, b, c) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let (s, co) = theta.sin_cos();
        (s / theta, (1.0 - co) / theta2, (theta - s) / (theta2 * theta))
    };
    let rotation = Mat3::identity() + wx * a + wx2 * b;
    let jac = Mat3::identity() + wx * b + wx2 * c;
    Pose { rotation, translation: jac * v }
}

/// Rigid transform `G` minimizing `sum |G(source_i) - target_i|^2` over
/// the translation parts of two pose sequences.
pub fn horn_align(source: &[Pose], target: &[Pose]) -> Result<Pose, GeometryError> {
    let s: Vec<Vec3> = source.iter().map(|p| p.translation).collect();
    let t: Vec<Vec3> = target.iter().map(|p| p.translation).collect();
    horn_align_points(&s, &t)
}

/// Closed-form absolute orientation with unit quaternions.
pub fn horn_align_points(source: &[Vec3], target: &[Vec3]) -> Result<Pose, GeometryError> {
    if source.len() != target.len() {
        return Err(GeometryError::LengthMismatch(source.len(), target.len()));
    }
    if source.len() < 3 {
        return Err(GeometryError::AlignmentDegenerate(format!(
            "need at least 3 correspondences, got {}",
            source.len()
        )));
    }
    let n = source.len() as f64;
    check_spread(source, &(source.iter().sum::<Vec3>() / n), "source")?;
    check_spread(target, &(target.iter().sum::<Vec3>() / n), "target")?;
    Ok(horn_fit(source, target))
}

/// Least-squares rigid fit without degeneracy checks. For collinear or
/// coincident input it returns one of the equally good minimizers.
pub(crate) fn horn_fit(source: &[Vec3], target: &[Vec3]) -> Pose {
    let n = source.len() as f64;
    let cs = source.iter().sum::<Vec3>() / n;
    let ct = target.iter().sum::<Vec3>() / n;
    let mut m = Mat3::zeros();
    for (a, b) in source.iter().zip(target) {
        m += (a - cs) * (b - ct).transpose();
    }
    let (sxx, sxy, sxz) = (m[(0, 0)], m[(0, 1)], m[(0, 2)]);
    let (syx, syy, syz) = (m[(1, 0)], m[(1, 1)], m[(1, 2)]);
    let (szx, szy, szz) = (m[(2, 0)], m[(2, 1)], m[(2, 2)]);
    #[rustfmt::skip]
    let nmat = Matrix4::new(
        sxx + syy + szz, syz - szy,        szx - sxz,        sxy - syx,
        syz - szy,       sxx - syy - szz,  sxy + syx,        szx + sxz,
        szx - sxz,       sxy + syx,        -sxx + syy - szz, syz + szy,
        sxy - syx,       szx + sxz,        syz + szy,        -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(nmat);
    let best = eig.eigenvalues.imax();
    let q = eig.eigenvectors.column(best);
    let rotation = Pose::from_quaternion(Vec3::zeros(), q[1], q[2], q[3], q[0]).rotation;
    Pose { rotation, translation: ct - rotation * cs }
}

fn check_spread(points: &[Vec3], centroid: &Vec3, which: &str) -> Result<(), GeometryError> {
    let mut scatter = Mat3::zeros();
    for p in points {
        let d = p - centroid;
        scatter += d * d.transpose();
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(scatter).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= f64::MIN_POSITIVE {
        return Err(GeometryError::AlignmentDegenerate(format!("{which} points coincide")));
    }
    if ev[1] <= 1e-12 * ev[0] {
        return Err(GeometryError::AlignmentDegenerate(format!("{which} points are collinear")));
    }
    Ok(())
}
