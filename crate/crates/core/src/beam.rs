//! Range uncertainty from beam divergence.
//!
//! A cone with the sensor's divergence is cast from the origin towards the
//! mean of a leaf. The cone is discretized into sub-beams on concentric
//! rings, each sub-beam is intersected with the leaf plane, and the spread
//! of the resulting ranges around the leaf distance is the range standard
//! deviation of that leaf. Wider footprints (longer range, grazing
//! incidence) give larger values.

use std::f64::consts::TAU;

use crate::geometry::Vec3;
use crate::kdtree::Leaf;

/// Sub-beams closer to parallel with the plane than this are discarded.
const GRAZING_COSINE: f64 = 1e-3;
/// Minimum number of surviving sub-beams for a valid estimate.
const MIN_SAMPLES: usize = 3;

/// Named divergence presets (full cone angle, radians).
pub const SENSOR_PRESETS: &[(&str, f64)] =
    &[("default", 3.0e-3), ("os0", 3.1e-3), ("os1", 3.1e-3), ("hdl-64e", 2.0e-3), ("vlp-16", 3.0e-3)];

pub fn sensor_divergence(name: &str) -> Option<f64> {
    SENSOR_PRESETS.iter().find(|(n, _)| *n == name).map(|(_, d)| *d)
}

/// Discretized beam cone.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamSpec {
    /// Full cone angle, radians.
    pub divergence: f64,
    /// Concentric rings around the axial ray.
    pub rings: usize,
    pub rays_per_ring: usize,
}

impl Default for BeamSpec {
    fn default() -> Self {
        BeamSpec { divergence: 3.0e-3, rings: 3, rays_per_ring: 12 }
    }
}

impl BeamSpec {
    /// Total sub-beam count, axial ray included.
    pub fn n_samples(&self) -> usize {
        1 + self.rings * self.rays_per_ring
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.divergence > 0.0 && self.divergence.is_finite()) {
            return Err(format!("beam divergence must be positive, got {}", self.divergence));
        }
        if self.n_samples() < MIN_SAMPLES {
            return Err(format!("need at least {MIN_SAMPLES} sub-beams, got {}", self.n_samples()));
        }
        Ok(())
    }

    /// Sub-beams as `(angle off axis, azimuth)`. Ring `j` of `R` sits at
    /// `half_angle * sqrt(j / R)`.
    pub fn offsets(&self) -> Vec<(f64, f64)> {
        let half = 0.5 * self.divergence;
        let mut out = Vec::with_capacity(self.n_samples());
        out.push((0.0, 0.0));
        for j in 1..=self.rings {
            let theta = half * (j as f64 / self.rings as f64).sqrt();
            for k in 0..self.rays_per_ring {
                out.push((theta, TAU * k as f64 / self.rays_per_ring as f64));
            }
        }
        out
    }

    /// Unit sub-beam directions around `axis` (unit).
    pub fn directions(&self, axis: &Vec3) -> Vec<Vec3> {
        let (u, v) = orthonormal_basis(axis);
        self.offsets()
            .into_iter()
            .map(|(theta, phi)| {
                let (st, ct) = theta.sin_cos();
                let (sp, cp) = phi.sin_cos();
                (axis * ct + (u * cp + v * sp) * st).normalize()
            })
            .collect()
    }
}

fn orthonormal_basis(axis: &Vec3) -> (Vec3, Vec3) {
    let helper = if axis.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = axis.cross(&helper).normalize();
    let v = axis.cross(&u);
    (u, v)
}

/// Outcome of the beam simulation for one leaf.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RangeSigma {
    /// Standard deviation in meters.
    Valid(f64),
    /// Fewer than three sub-beams hit the plane in front of the sensor.
    Grazing,
}

impl RangeSigma {
    pub fn value(self) -> Option<f64> {
        match self {
            RangeSigma::Valid(s) => Some(s),
            RangeSigma::Grazing => None,
        }
    }
}

pub fn simulate_sigma(leaf: &Leaf, spec: &BeamSpec) -> RangeSigma {
    simulate_sigma_plane(&leaf.mean, &leaf.normal, spec)
}

/// Beam simulation against the plane through `mean` with unit `normal`,
/// sensor at the origin.
pub fn simulate_sigma_plane(mean: &Vec3, normal: &Vec3, spec: &BeamSpec) -> RangeSigma {
    let range = mean.norm();
    if !(range > 0.0) {
        return RangeSigma::Grazing;
    }
    let axis = mean / range;
    let offset = normal.dot(mean);
    let mut sum = 0.0;
    let mut count = 0usize;
    for dir in spec.directions(&axis) {
        let c = normal.dot(&dir);
        if c.abs() < GRAZING_COSINE {
            continue;
        }
        let t = offset / c;
        if !(t > 0.0) {
            continue;
        }
        sum += (t - range).powi(2);
        count += 1;
    }
    if count < MIN_SAMPLES {
        return RangeSigma::Grazing;
    }
    RangeSigma::Valid((sum / count as f64).sqrt())
}

/// Clamp bounds and the median used to scale sigmas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SigmaNormalization {
    pub sigma_floor: f64,
    pub sigma_cap: f64,
    /// Median of the clamped sigmas, meters.
    pub scale: f64,
}

impl SigmaNormalization {
    pub fn apply(&self, sigma: RangeSigma) -> f64 {
        self.clamp(sigma) / self.scale
    }

    fn clamp(&self, sigma: RangeSigma) -> f64 {
        match sigma {
            RangeSigma::Valid(s) => s.clamp(self.sigma_floor, self.sigma_cap),
            RangeSigma::Grazing => self.sigma_cap,
        }
    }
}

/// Clamps every sigma to `[floor, cap]` (grazing leaves get `cap`) and
/// divides by the median of the clamped values, so the median measurement
/// has unit weight.
pub fn normalize_sigmas(sigmas: &[RangeSigma], floor: f64, cap: f64) -> (SigmaNormalization, Vec<f64>) {
    assert!(!sigmas.is_empty(), "cannot normalize an empty sigma list");
    assert!(0.0 < floor && floor < cap, "need 0 < floor < cap");
    let mut norm = SigmaNormalization { sigma_floor: floor, sigma_cap: cap, scale: 1.0 };
    let clamped: Vec<f64> = sigmas.iter().map(|s| norm.clamp(*s)).collect();
    let mut sorted = clamped.clone();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() / 2;
    norm.scale = if sorted.len() % 2 == 1 { sorted[m] } else { 0.5 * (sorted[m - 1] + sorted[m]) };
    let normalized = clamped.into_iter().map(|s| s / norm.scale).collect();
    (norm, normalized)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Independent closed form: a ray at angle `theta` off the axis and
    /// azimuth `phi` against a plane whose normal is tilted by `tilt` from
    /// the axis within the (axis, u) plane, at axial distance `range`.
    fn oracle_sigma(range: f64, tilt: f64, spec: &BeamSpec) -> f64 {
        let half = spec.divergence / 2.0;
        let mut rays = vec![(0.0f64, 0.0f64)];
        for j in 1..=spec.rings {
            for k in 0..spec.rays_per_ring {
                rays.push((half * ((j as f64) / spec.rings as f64).sqrt(), TAU * k as f64 / spec.rays_per_ring as f64));
            }
        }
        let sum: f64 = rays
            .iter()
            .map(|&(theta, phi)| {
                // cos of angle between ray and plane normal
                let c = theta.cos() * tilt.cos() + theta.sin() * phi.cos() * tilt.sin();
                let r = range * tilt.cos() / c;
                (r - range).powi(2)
            })
            .sum();
        (sum / rays.len() as f64).sqrt()
    }

    fn tilted_plane(range: f64, tilt: f64) -> (Vec3, Vec3) {
        // Axis along +z; u = z x x = +y for the chosen basis helper.
        let mean = Vec3::new(0.0, 0.0, range);
        let axis = Vec3::z();
        let (u, _) = orthonormal_basis(&axis);
        // Normal faces the sensor: -axis rotated towards -u.
        let normal = -(axis * tilt.cos() + u * tilt.sin());
        (mean, normal)
    }

    #[test]
    fn perpendicular_incidence_matches_closed_form() {
        let spec = BeamSpec::default();
        assert_eq!(spec.n_samples(), 37);
        let s = simulate_sigma_plane(&Vec3::new(0.0, 0.0, 10.0), &Vec3::z(), &spec);
        let half = spec.divergence / 2.0;
        let mut sum = 0.0;
        for j in 1..=3 {
            let theta = half * (j as f64 / 3.0).sqrt();
            sum += 12.0 * (10.0 / theta.cos() - 10.0).powi(2);
        }
        let want = (sum / 37.0).sqrt();
        assert_relative_eq!(s.value().unwrap(), want, max_relative = 1e-9);
    }

    #[test]
    fn tilted_plane_is_larger() {
        let spec = BeamSpec::default();
        let (m, n) = tilted_plane(10.0, 0.0);
        let flat = simulate_sigma_plane(&m, &n, &spec).value().unwrap();
        let (m, n) = tilted_plane(10.0, 60f64.to_radians());
        let tilted = simulate_sigma_plane(&m, &n, &spec).value().unwrap();
        assert!(tilted > flat, "{tilted} <= {flat}");
    }

    #[test]
    fn narrow_beam_has_vanishing_sigma() {
        let spec = BeamSpec { divergence: 1e-12, ..Default::default() };
        let (m, n) = tilted_plane(25.0, 0.7);
        let s = simulate_sigma_plane(&m, &n, &spec).value().unwrap();
        assert!(s < 1e-9);
    }

    #[test]
    fn matches_oracle_over_configurations() {
        let spec = BeamSpec { divergence: 0.02, rings: 4, rays_per_ring: 9 };
        for range in [0.5, 3.0, 17.0, 80.0] {
            for deg in [0.0, 10.0, 35.0, 60.0, 80.0] {
                let (m, n) = tilted_plane(range, f64::to_radians(deg));
                let got = simulate_sigma_plane(&m, &n, &spec).value().unwrap();
                let want = oracle_sigma(range, f64::to_radians(deg), &spec);
                assert!((got - want).abs() < 1e-9, "range {range} tilt {deg}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn grazing_plane_is_flagged() {
        let spec = BeamSpec::default();
        // Plane containing the beam axis.
        let s = simulate_sigma_plane(&Vec3::new(0.0, 0.0, 10.0), &Vec3::x(), &spec);
        assert_eq!(s, RangeSigma::Grazing);
        assert_eq!(simulate_sigma_plane(&Vec3::zeros(), &Vec3::x(), &spec), RangeSigma::Grazing);
    }

    #[test]
    fn normalization_examples() {
        let v = |x| RangeSigma::Valid(x);
        let (n, out) = normalize_sigmas(&[v(0.01), v(0.02), v(0.04)], 0.001, 1.0);
        assert_relative_eq!(n.scale, 0.02);
        assert_relative_eq!(out[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(out[1], 1.0, epsilon = 1e-15);
        assert_relative_eq!(out[2], 2.0, epsilon = 1e-15);

        let (_, out) = normalize_sigmas(&[v(0.3); 5], 0.001, 1.0);
        assert!(out.iter().all(|&x| x == 1.0));
        let (_, out) = normalize_sigmas(&[v(0.3)], 0.001, 1.0);
        assert_eq!(out, vec![1.0]);

        // Grazing keeps the cap, values below floor are clamped.
        let (n, out) = normalize_sigmas(&[v(1e-6), RangeSigma::Grazing, v(0.01)], 0.001, 0.5);
        assert_relative_eq!(n.scale, 0.01);
        assert_relative_eq!(out[0], 0.1, epsilon = 1e-15);
        assert_relative_eq!(out[1], 50.0, epsilon = 1e-12);
    }

    #[test]
    fn validation() {
        assert!(BeamSpec::default().validate().is_ok());
        assert!(BeamSpec { divergence: 0.0, ..Default::default() }.validate().is_err());
        assert!(BeamSpec { rings: 0, ..Default::default() }.validate().is_err());
        assert_eq!(sensor_divergence("hdl-64e"), Some(2.0e-3));
        assert_eq!(sensor_divergence("nope"), None);
    }
}
