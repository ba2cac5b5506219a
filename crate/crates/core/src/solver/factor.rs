//! Point-to-plane factor between a leaf mean and a surfel.
//!
//! For a scan pose `T` (sensor to world), surfel center `p`, normal `n`,
//! offset `q`, leaf mean `x` in the sensor frame and range sigma `s`:
//!
//! ```text
//! e = (R^T n)^T (T^-1 (p + q n) - x) / s  =  n^T (p + q n - T x) / s
//! ```
//!
//! Pose derivatives are taken for the local update `T exp(delta)` with
//! `delta = (v, w)`. With `m = R^T n` (normal in the sensor frame):
//!
//! ```text
//! de/dv = -m^T / s,   de/dw = (m x x)^T / s,   de/dq = 1 / s
//! ```

use nalgebra::Vector6;

use crate::geometry::{Pose, Vec3};
use crate::surfel::Surfel;

/// Robust loss applied to each residual.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RobustKernel {
    /// Quadratic up to the threshold, linear beyond.
    Huber(f64),
    /// Plain least squares.
    Quadratic,
}

impl RobustKernel {
    /// Cost and IRLS weight of a residual.
    #[inline]
    pub fn evaluate(&self, e: f64) -> (f64, f64) {
        match *self {
            RobustKernel::Huber(rho) => huber_cost(e, rho),
            RobustKernel::Quadratic => (0.5 * e * e, 1.0),
        }
    }
}

/// Huber loss with threshold `rho_ker` and its IRLS weight.
#[inline]
pub fn huber_cost(e: f64, rho_ker: f64) -> (f64, f64) {
    let a = e.abs();
    if a <= rho_ker {
        (0.5 * e * e, 1.0)
    } else {
        (rho_ker * (a - 0.5 * rho_ker), rho_ker / a)
    }
}

/// Residual for a world-to-sensor pose, evaluated literally: both the
/// normal and the displaced surfel center are mapped into the sensor frame.
pub fn residual(world_to_sensor: &Pose, surfel: &Surfel, leaf_mean: &Vec3, sigma: f64) -> f64 {
    let n_k = world_to_sensor.rotate(&surfel.normal);
    let p_k = world_to_sensor.apply_point(&surfel.position());
    n_k.dot(&(p_k - leaf_mean)) / sigma
}

/// Residual in terms of the sensor-to-world pose.
#[inline]
pub(crate) fn residual_world(
    sensor_to_world: &Pose,
    position: &Vec3,
    normal: &Vec3,
    leaf_mean: &Vec3,
    inv_sigma: f64,
) -> f64 {
    normal.dot(&(position - sensor_to_world.apply_point(leaf_mean))) * inv_sigma
}

/// Pose Jacobian for the update `T exp(delta)`, `T` sensor to world.
#[inline]
pub(crate) fn pose_jacobian(sensor_to_world: &Pose, normal: &Vec3, leaf_mean: &Vec3, inv_sigma: f64) -> Vector6<f64> {
    let m = sensor_to_world.rotation.transpose() * normal;
    let w = m.cross(leaf_mean);
    Vector6::new(-m.x, -m.y, -m.z, w.x, w.y, w.z) * inv_sigma
}

/// Derivatives of [`residual`] with respect to the pose update (applied on
/// the right of the sensor-to-world pose `world_to_sensor^-1`) and to the
/// surfel offset.
pub fn jacobians(world_to_sensor: &Pose, surfel: &Surfel, leaf_mean: &Vec3, sigma: f64) -> (Vector6<f64>, f64) {
    let inv = 1.0 / sigma;
    (pose_jacobian(&world_to_sensor.inverse(), &surfel.normal, leaf_mean, inv), inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_exp, Twist};
    use approx::assert_relative_eq;

    fn surfel(p: Vec3, n: Vec3, q: f64) -> Surfel {
        let mut s = Surfel::new(p, n, 0.1, vec![]);
        s.offset = q;
        s
    }

    #[test]
    fn residual_examples() {
        let id = Pose::identity();
        let s = surfel(Vec3::new(0.0, 0.0, 1.0), Vec3::z(), 0.0);
        assert_eq!(residual(&id, &s, &Vec3::new(0.0, 0.0, 1.0), 1.0), 0.0);
        assert_relative_eq!(residual(&id, &s, &Vec3::new(0.0, 0.0, 0.8), 1.0), 0.2, epsilon = 1e-15);
        assert_relative_eq!(residual(&id, &s, &Vec3::new(0.0, 0.0, 0.8), 2.0), 0.1, epsilon = 1e-15);
    }

    #[test]
    fn huber_examples() {
        assert_eq!(huber_cost(0.0, 0.1), (0.0, 1.0));
        let (c, w) = huber_cost(0.1, 0.1);
        assert_relative_eq!(c, 0.005, epsilon = 1e-15);
        assert_eq!(w, 1.0);
        let (c, w) = huber_cost(0.4, 0.1);
        assert_relative_eq!(c, 0.035, epsilon = 1e-15);
        assert_relative_eq!(w, 0.25, epsilon = 1e-15);
        let (c, w) = huber_cost(-0.4, 0.1);
        assert_relative_eq!(c, 0.035, epsilon = 1e-15);
        assert_relative_eq!(w, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn world_form_matches_literal_form() {
        let t = se3_exp(&Twist::new(Vec3::new(1.0, -2.0, 0.3), Vec3::new(0.2, 0.1, -1.2)));
        let s = surfel(Vec3::new(3.0, 1.0, -0.5), Vec3::new(0.3, -0.2, 0.9).normalize(), 0.07);
        let x = Vec3::new(0.4, 2.2, -1.0);
        let literal = residual(&t.inverse(), &s, &x, 0.3);
        let world = residual_world(&t, &s.position(), &s.normal, &x, 1.0 / 0.3);
        assert_relative_eq!(literal, world, epsilon = 1e-12);
        let (_, jq) = jacobians(&t.inverse(), &s, &x, 0.3);
        assert_eq!(jq, 1.0 / 0.3);
    }
}
