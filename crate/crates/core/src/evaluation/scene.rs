//! Synthetic scenes: rectangular panels scanned by a spinning LiDAR along
//! an elliptical trajectory.
//!
//! Panels never touch each other, so every return lies on exactly one
//! plane and noise-free scans agree exactly with the reference map.

use nalgebra::Rotation3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::EvalError;
use crate::cloud_io::{Cloud, Trajectory};
use crate::config::{ConfigError, KeyValues};
use crate::exec::Execution;
use crate::geometry::{Pose, Twist, Vec3};

/// Bounded plane: `center + a u + b v` with `|a| <= half_u`, `|b| <= half_v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Panel {
    pub center: Vec3,
    pub u: Vec3,
    pub v: Vec3,
    pub half_u: f64,
    pub half_v: f64,
}

impl Panel {
    pub fn new(center: Vec3, u: Vec3, v: Vec3, half_u: f64, half_v: f64) -> Self {
        let u = u.normalize();
        let v = (v - u * u.dot(&v)).normalize();
        Panel { center, u, v, half_u, half_v }
    }

    pub fn normal(&self) -> Vec3 {
        self.u.cross(&self.v)
    }

    /// Ray parameter of the hit, if any, beyond `t_min`.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3, t_min: f64) -> Option<f64> {
        let n = self.normal();
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = n.dot(&(self.center - origin)) / denom;
        if t < t_min {
            return None;
        }
        let d = origin + dir * t - self.center;
        (d.dot(&self.u).abs() <= self.half_u && d.dot(&self.v).abs() <= self.half_v).then_some(t)
    }

    /// Grid samples with the given spacing, edges included.
    pub fn sample(&self, spacing: f64) -> Vec<Vec3> {
        let nu = (2.0 * self.half_u / spacing).floor() as usize;
        let nv = (2.0 * self.half_v / spacing).floor() as usize;
        let mut out = Vec::with_capacity((nu + 1) * (nv + 1));
        for i in 0..=nu {
            for j in 0..=nv {
                let a = -self.half_u + i as f64 * spacing;
                let b = -self.half_v + j as f64 * spacing;
                out.push(self.center + self.u * a + self.v * b);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScenePreset {
    /// Room with floor, ceiling, walls and free-standing pillars.
    BoxWorld,
    /// Box world plus slanted panels and fins seen at grazing incidence,
    /// with incidence-dependent range noise.
    MixedIncidence,
}

impl std::str::FromStr for ScenePreset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "box-world" => Ok(ScenePreset::BoxWorld),
            "mixed-incidence" => Ok(ScenePreset::MixedIncidence),
            other => Err(format!("unknown scene preset '{other}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub preset: ScenePreset,
    /// Full room extents, meters.
    pub room: Vec3,
    /// Clearance between panels that would otherwise meet, meters.
    pub edge_gap: f64,
    pub scans: usize,
    /// Semi-axes of the elliptical trajectory, meters.
    pub orbit: (f64, f64),
    pub sensor_height: f64,
    /// Seconds between scans.
    pub scan_period: f64,
    pub channels: usize,
    /// Elevation range of the channels, radians.
    pub elevation: (f64, f64),
    pub azimuth_steps: usize,
    pub min_range: f64,
    pub max_range: f64,
    /// Range noise standard deviation, meters.
    pub range_noise: f64,
    /// Beam divergence driving extra range noise at oblique incidence;
    /// zero disables it.
    pub footprint_divergence: f64,
    /// Fraction of the half-footprint range spread by which returns are
    /// shortened, modeling detection on the near edge of the footprint.
    pub footprint_bias: f64,
    /// Per-axis pose perturbation, meters and radians.
    pub translation_std: f64,
    pub rotation_std: f64,
    /// Reference map sampling, meters.
    pub gt_spacing: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn preset(preset: ScenePreset) -> Self {
        let mixed = preset == ScenePreset::MixedIncidence;
        SceneSpec {
            preset,
            room: Vec3::new(16.0, 10.0, 4.0),
            edge_gap: 0.3,
            scans: 20,
            orbit: (4.5, 2.5),
            sensor_height: 1.5,
            scan_period: 0.1,
            channels: 32,
            elevation: ((-30f64).to_radians(), 30f64.to_radians()),
            azimuth_steps: 720,
            min_range: 0.3,
            max_range: 40.0,
            range_noise: 0.01,
            footprint_divergence: if mixed { 3e-3 } else { 0.0 },
            footprint_bias: if mixed { 0.5 } else { 0.0 },
            translation_std: 0.05,
            rotation_std: 0.5f64.to_radians(),
            gt_spacing: 0.1,
            seed: 7,
        }
    }

    /// Reads a spec; `preset` picks the defaults the other keys override.
    pub fn from_key_values(mut kv: KeyValues) -> Result<Self, ConfigError> {
        let preset = kv.take_or("preset", ScenePreset::BoxWorld)?;
        let d = SceneSpec::preset(preset);
        let spec = SceneSpec {
            preset,
            room: Vec3::new(
                kv.take_or("room_x", d.room.x)?,
                kv.take_or("room_y", d.room.y)?,
                kv.take_or("room_z", d.room.z)?,
            ),
            edge_gap: kv.take_or("edge_gap", d.edge_gap)?,
            scans: kv.take_or("scans", d.scans)?,
            orbit: (kv.take_or("orbit_a", d.orbit.0)?, kv.take_or("orbit_b", d.orbit.1)?),
            sensor_height: kv.take_or("sensor_height", d.sensor_height)?,
            scan_period: kv.take_or("scan_period", d.scan_period)?,
            channels: kv.take_or("channels", d.channels)?,
            elevation: (
                kv.take_or("elevation_min_deg", d.elevation.0.to_degrees())?.to_radians(),
                kv.take_or("elevation_max_deg", d.elevation.1.to_degrees())?.to_radians(),
            ),
            azimuth_steps: kv.take_or("azimuth_steps", d.azimuth_steps)?,
            min_range: kv.take_or("min_range", d.min_range)?,
            max_range: kv.take_or("max_range", d.max_range)?,
            range_noise: kv.take_or("range_noise", d.range_noise)?,
            footprint_divergence: kv.take_or("footprint_divergence", d.footprint_divergence)?,
            footprint_bias: kv.take_or("footprint_bias", d.footprint_bias)?,
            translation_std: kv.take_or("translation_std", d.translation_std)?,
            rotation_std: kv.take_or("rotation_std_deg", d.rotation_std.to_degrees())?.to_radians(),
            gt_spacing: kv.take_or("gt_spacing", d.gt_spacing)?,
            seed: kv.take_or("seed", d.seed)?,
        };
        kv.finish()?;
        spec.validate().map_err(|m| ConfigError::InvalidValue {
            key: "scene".into(),
            value: String::new(),
            message: m,
        })?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [self.room.x, self.room.y, self.room.z, self.scan_period, self.max_range, self.gt_spacing];
        if !positive.iter().all(|v| *v > 0.0 && v.is_finite()) {
            return Err("room extents, scan period, max range and gt spacing must be positive".into());
        }
        let non_negative = [
            self.edge_gap,
            self.min_range,
            self.range_noise,
            self.footprint_divergence,
            self.footprint_bias,
            self.translation_std,
            self.rotation_std,
        ];
        if !non_negative.iter().all(|v| *v >= 0.0 && v.is_finite()) {
            return Err("gaps, noise levels and min range must be non-negative".into());
        }
        if self.scans < 2 || self.channels == 0 || self.azimuth_steps == 0 {
            return Err("need at least 2 scans, 1 channel and 1 azimuth step".into());
        }
        if self.elevation.0 > self.elevation.1 || self.min_range >= self.max_range {
            return Err("elevation and range intervals must be ordered".into());
        }
        if 2.0 * self.edge_gap >= self.room.x.min(self.room.y).min(self.room.z) {
            return Err("edge gap leaves no panel".into());
        }
        Ok(())
    }

    pub fn panels(&self) -> Vec<Panel> {
        let (hx, hy, hz) = (self.room.x / 2.0, self.room.y / 2.0, self.room.z / 2.0);
        let g = self.edge_gap;
        let (x, y, z) = (Vec3::x(), Vec3::y(), Vec3::z());
        let mut p = vec![
            Panel::new(Vec3::zeros(), x, y, hx - g, hy - g),
            Panel::new(Vec3::new(0.0, 0.0, self.room.z), x, y, hx - g, hy - g),
            Panel::new(Vec3::new(hx, 0.0, hz), y, z, hy - g, hz - g),
            Panel::new(Vec3::new(-hx, 0.0, hz), y, z, hy - g, hz - g),
            Panel::new(Vec3::new(0.0, hy, hz), x, z, hx - g, hz - g),
            Panel::new(Vec3::new(0.0, -hy, hz), x, z, hx - g, hz - g),
        ];
        // Square pillars; each face is a separate panel narrower than the
        // pillar so neighboring faces stay apart.
        let (half, face) = (0.4, 0.25);
        let pillar_h = hz - g;
        for (cx, cy) in [(1.5, 0.0), (-1.5, 0.0), (5.5, 3.5), (-5.5, -3.5), (6.0, -3.2), (-6.0, 3.2)] {
            let c = Vec3::new(cx, cy, hz);
            p.push(Panel::new(c + x * half, y, z, face, pillar_h));
            p.push(Panel::new(c - x * half, y, z, face, pillar_h));
            p.push(Panel::new(c + y * half, x, z, face, pillar_h));
            p.push(Panel::new(c - y * half, x, z, face, pillar_h));
        }
        if self.preset == ScenePreset::MixedIncidence {
            // Shallow ramps near the floor and fins along the travel
            // direction, both seen at grazing incidence from most poses.
            let tilt = 15f64.to_radians();
            for s in [-1.0, 1.0] {
                let up = Vec3::new(0.0, -s * tilt.cos(), tilt.sin());
                p.push(Panel::new(Vec3::new(0.0, s * (hy - 1.0), 0.6), x, up, 4.0, 0.4));
                p.push(Panel::new(Vec3::new(s * (hx - 2.0), s * 0.5, hz), x, z, 1.0, hz - g));
                p.push(Panel::new(Vec3::new(0.0, s * 3.8, 2.9), x, y + z * 0.2 * s, 3.0, 0.5));
            }
        }
        p
    }

    pub fn gt_poses(&self) -> Vec<Pose> {
        (0..self.scans)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / self.scans as f64;
                let t = Vec3::new(self.orbit.0 * a.cos(), self.orbit.1 * a.sin(), self.sensor_height);
                let yaw = a + std::f64::consts::FRAC_PI_2;
                let r = Rotation3::from_euler_angles(0.02 * (2.0 * a).cos(), 0.03 * (3.0 * a).sin(), yaw);
                Pose::new(*r.matrix(), t)
            })
            .collect()
    }

    /// Unit ray directions in the sensor frame, channel-major.
    fn rays(&self) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(self.channels * self.azimuth_steps);
        for c in 0..self.channels {
            let f = if self.channels == 1 { 0.5 } else { c as f64 / (self.channels - 1) as f64 };
            let el = self.elevation.0 + f * (self.elevation.1 - self.elevation.0);
            for a in 0..self.azimuth_steps {
                let az = std::f64::consts::TAU * a as f64 / self.azimuth_steps as f64;
                out.push(Vec3::new(az.cos() * el.cos(), az.sin() * el.cos(), el.sin()));
            }
        }
        out
    }
}

/// Generated data; poses are sensor to world, timestamps `k * scan_period`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub clouds: Vec<Cloud>,
    pub ground_truth: Trajectory,
    pub initial: Trajectory,
    pub gt_map: Vec<Vec3>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Applies `T exp(delta)` with independent Gaussian components to every pose.
pub fn perturb_poses(poses: &[Pose], translation_std: f64, rotation_std: f64, rng: &mut ChaCha8Rng) -> Vec<Pose> {
    poses
        .iter()
        .map(|p| {
            let v = Vec3::new(gaussian(rng), gaussian(rng), gaussian(rng)) * translation_std;
            let w = Vec3::new(gaussian(rng), gaussian(rng), gaussian(rng)) * rotation_std;
            p.retract(&Twist::new(v, w))
        })
        .collect()
}

fn scan(spec: &SceneSpec, panels: &[Panel], rays: &[Vec3], pose: &Pose, k: usize) -> Cloud {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(k as u64 + 1);
    let mut points = Vec::new();
    for d in rays {
        let dir = pose.rotate(d);
        let hit = panels
            .iter()
            .filter_map(|p| p.intersect(&pose.translation, &dir, spec.min_range).map(|t| (t, p)))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        let Some((t, panel)) = hit else { continue };
        if t > spec.max_range {
            continue;
        }
        let cos = panel.normal().dot(&dir).abs().max(1e-3);
        let footprint = t * (1.0 - cos * cos).sqrt() / cos * spec.footprint_divergence * 0.5;
        let std = (spec.range_noise.powi(2) + footprint.powi(2)).sqrt();
        let r = t - spec.footprint_bias * footprint + std * gaussian(&mut rng);
        points.push(d * r);
    }
    let mut cloud = Cloud::new(points, k);
    cloud.timestamp = k as f64 * spec.scan_period;
    cloud
}

/// Simulates every scan, the perturbed initial trajectory and the
/// reference map. Output depends only on `spec`.
pub fn generate_scene(spec: &SceneSpec, exec: Execution) -> Result<Scene, EvalError> {
    spec.validate().map_err(EvalError::InvalidParameter)?;
    let panels = spec.panels();
    let rays = spec.rays();
    let gt = spec.gt_poses();
    let clouds = exec.map_range(gt.len(), |k| scan(spec, &panels, &rays, &gt[k], k));
    if let Some(c) = clouds.iter().find(|c| c.is_empty()) {
        return Err(EvalError::EmptyScan(c.scan_id));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let initial = perturb_poses(&gt, spec.translation_std, spec.rotation_std, &mut rng);
    let stamps: Vec<f64> = (0..gt.len()).map(|k| k as f64 * spec.scan_period).collect();
    let gt_map = panels.iter().flat_map(|p| p.sample(spec.gt_spacing)).collect();
    Ok(Scene {
        clouds,
        ground_truth: Trajectory::new(stamps.clone(), gt).expect("timestamps increase"),
        initial: Trajectory::new(stamps, initial).expect("timestamps increase"),
        gt_map,
    })
}
