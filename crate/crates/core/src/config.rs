//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys may appear at
//! most once per file; later overrides (command-line `--set`) replace file
//! values. Unknown keys are errors so typos do not pass silently.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::association::MatchThresholds;
use crate::beam::{sensor_divergence, BeamSpec};
use crate::cloud_io::{CloudFormat, TrajectoryFormat};
use crate::exec::Execution;
use crate::kdtree::KdParams;
use crate::solver::{BaConfig, LmSettings, RobustKernel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("invalid value `{value}` for `{key}`: {message}")]
    InvalidValue { key: String, value: String, message: String },
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// Ordered key-value pairs with typed, consuming accessors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    message: format!("expected `key = value`, got `{line}`"),
                });
            };
            let key = k.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(ConfigError::Syntax { line: i + 1, message: format!("bad key `{key}`") });
            }
            if entries.insert(key.to_string(), v.trim().to_string()).is_some() {
                return Err(ConfigError::Syntax { line: i + 1, message: format!("duplicate key `{key}`") });
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn read(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.to_path_buf(), message: e.to_string() })?;
        Self::parse(&text)
    }

    /// Sets or replaces a value.
    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax { line: 0, message: format!("override `{pair}` is not key=value") })?;
        self.set(k.trim(), v.trim());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Removes and parses a value.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e: T::Err| ConfigError::InvalidValue {
                key: key.to_string(),
                value: v.clone(),
                message: e.to_string(),
            }),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// Accepts `on/off`, `true/false`, `yes/no`, `1/0`.
    pub fn take_flag(&mut self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.entries.remove(key) {
            None => Ok(default),
            Some(v) => match v.to_ascii_lowercase().as_str() {
                "on" | "true" | "yes" | "1" => Ok(true),
                "off" | "false" | "no" | "0" => Ok(false),
                _ => Err(ConfigError::InvalidValue { key: key.into(), value: v, message: "expected on/off".into() }),
            },
        }
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<(), ConfigError> {
        match self.entries.into_keys().next() {
            Some(k) => Err(ConfigError::UnknownKey(k)),
            None => Ok(()),
        }
    }
}

fn invalid(key: &str, value: impl ToString, message: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue { key: key.into(), value: value.to_string(), message: message.into() }
}

/// Everything `ba` needs: inputs, outputs and solver parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Directory of scans, read in lexicographic file-name order.
    pub clouds: PathBuf,
    pub cloud_format: CloudFormat,
    pub initial_trajectory: PathBuf,
    pub trajectory_format: TrajectoryFormat,
    pub ground_truth: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Sensor preset the divergence came from, if any.
    pub sensor: Option<String>,
    /// Recorded in the manifest; the pipeline itself draws no random numbers.
    pub seed: u64,
    /// Worker threads, 0 for one per core.
    pub threads: usize,
    pub ba: BaConfig,
}

impl PipelineConfig {
    /// Keys understood by [`PipelineConfig::from_key_values`] with defaults.
    pub const KEYS: &'static [(&'static str, &'static str)] = &[
        ("clouds", "directory of scans (required)"),
        ("cloud_format", "kitti-bin | ply | xyz (kitti-bin)"),
        ("initial_trajectory", "initial poses (required)"),
        ("trajectory_format", "tum | kitti (tum)"),
        ("ground_truth", "optional reference trajectory, same format"),
        ("output_dir", "output directory (out)"),
        ("d_e", "match distance, m (0.5)"),
        ("d_n", "match normal distance, m (1.0)"),
        ("d_theta_deg", "match angle, degrees (5)"),
        ("rho_ker", "Huber threshold (0.1)"),
        ("robust_kernel", "huber | none (huber)"),
        ("b_max", "max leaf extent, m (0.2)"),
        ("b_min", "flatness threshold, m (0.1)"),
        ("sensor", "divergence preset: default, os0, os1, hdl-64e, vlp-16"),
        ("beam_divergence", "full cone angle, rad (3e-3); overrides sensor"),
        ("beam_rings", "sub-beam rings (3)"),
        ("beam_rays_per_ring", "sub-beams per ring (12)"),
        ("sigma_floor", "m (1e-3)"),
        ("sigma_cap", "m (1.0)"),
        ("uncertainty", "on | off (on)"),
        ("pose_only", "on | off (off)"),
        ("outer_iterations", "(10)"),
        ("inner_iterations", "(20)"),
        ("convergence_tol", "inner relative cost decrease (1e-4)"),
        ("outer_tol", "outer relative cost change (1e-4)"),
        ("min_scans_per_surfel", "(2)"),
        ("ate_max_dt", "s (0.05)"),
        ("execution", "parallel | sequential (parallel)"),
        ("threads", "0 = all cores (0)"),
        ("seed", "(0)"),
    ];

    /// Relative paths are resolved against `base`.
    pub fn from_key_values(mut kv: KeyValues, base: &Path) -> Result<Self, ConfigError> {
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        let clouds = resolve(kv.take::<PathBuf>("clouds")?.ok_or_else(|| ConfigError::Missing("clouds".into()))?);
        let initial_trajectory = resolve(
            kv.take::<PathBuf>("initial_trajectory")?
                .ok_or_else(|| ConfigError::Missing("initial_trajectory".into()))?,
        );
        let cloud_format = kv.take_or("cloud_format", CloudFormat::KittiBin)?;
        let trajectory_format = kv.take_or("trajectory_format", TrajectoryFormat::Tum)?;
        let ground_truth = kv.take::<PathBuf>("ground_truth")?.map(resolve);
        let output_dir = resolve(kv.take_or("output_dir", PathBuf::from("out"))?);

        let d = BaConfig::default();
        let thresholds = MatchThresholds {
            d_e: kv.take_or("d_e", d.thresholds.d_e)?,
            d_n: kv.take_or("d_n", d.thresholds.d_n)?,
            d_theta: kv.take_or("d_theta_deg", d.thresholds.d_theta.to_degrees())?.to_radians(),
        };
        let kd = KdParams { b_max: kv.take_or("b_max", d.kd.b_max)?, b_min: kv.take_or("b_min", d.kd.b_min)? };
        let rho: f64 = kv.take_or("rho_ker", 0.1)?;
        let kernel = match kv.take_or("robust_kernel", "huber".to_string())?.as_str() {
            "huber" => RobustKernel::Huber(rho),
            "none" => RobustKernel::Quadratic,
            other => return Err(invalid("robust_kernel", other, "expected huber or none")),
        };
        let sensor: Option<String> = kv.take("sensor")?;
        let mut divergence = d.beam.divergence;
        if let Some(name) = &sensor {
            divergence = sensor_divergence(name).ok_or_else(|| invalid("sensor", name, "unknown sensor preset"))?;
        }
        let beam = BeamSpec {
            divergence: kv.take_or("beam_divergence", divergence)?,
            rings: kv.take_or("beam_rings", d.beam.rings)?,
            rays_per_ring: kv.take_or("beam_rays_per_ring", d.beam.rays_per_ring)?,
        };
        let exec = match kv.take_or("execution", "parallel".to_string())?.as_str() {
            "parallel" => Execution::Parallel,
            "sequential" => Execution::Sequential,
            other => return Err(invalid("execution", other, "expected parallel or sequential")),
        };
        let ba = BaConfig {
            kd,
            thresholds,
            kernel,
            beam,
            sigma_floor: kv.take_or("sigma_floor", d.sigma_floor)?,
            sigma_cap: kv.take_or("sigma_cap", d.sigma_cap)?,
            uncertainty: kv.take_flag("uncertainty", d.uncertainty)?,
            pose_only: kv.take_flag("pose_only", d.pose_only)?,
            outer_iterations: kv.take_or("outer_iterations", d.outer_iterations)?,
            outer_tol: kv.take_or("outer_tol", d.outer_tol)?,
            lm: LmSettings {
                max_iterations: kv.take_or("inner_iterations", d.lm.max_iterations)?,
                convergence_tol: kv.take_or("convergence_tol", d.lm.convergence_tol)?,
                ..d.lm
            },
            min_scans_per_surfel: kv.take_or("min_scans_per_surfel", d.min_scans_per_surfel)?,
            ate_max_dt: kv.take_or("ate_max_dt", d.ate_max_dt)?,
            exec,
        };
        let threads = kv.take_or("threads", 0usize)?;
        let seed = kv.take_or("seed", 0u64)?;
        kv.finish()?;
        ba.validate().map_err(|m| ConfigError::InvalidValue {
            key: "parameters".into(),
            value: String::new(),
            message: m,
        })?;
        if !(ba.ate_max_dt > 0.0) {
            return Err(invalid("ate_max_dt", ba.ate_max_dt, "must be positive"));
        }
        Ok(PipelineConfig {
            clouds,
            cloud_format,
            initial_trajectory,
            trajectory_format,
            ground_truth,
            output_dir,
            sensor,
            seed,
            threads,
            ba,
        })
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut kv = KeyValues::read(path)?;
        for o in overrides {
            kv.set_pair(o)?;
        }
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_key_values(kv, base)
    }

    /// Canonical text form with every key spelled out. Parsing it back
    /// yields an equal config.
    pub fn to_text(&self) -> String {
        let b = &self.ba;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("clouds", self.clouds.display().to_string());
        put("cloud_format", self.cloud_format.to_string());
        put("initial_trajectory", self.initial_trajectory.display().to_string());
        put("trajectory_format", self.trajectory_format.to_string());
        if let Some(gt) = &self.ground_truth {
            put("ground_truth", gt.display().to_string());
        }
        put("output_dir", self.output_dir.display().to_string());
        put("d_e", b.thresholds.d_e.to_string());
        put("d_n", b.thresholds.d_n.to_string());
        put("d_theta_deg", b.thresholds.d_theta.to_degrees().to_string());
        match b.kernel {
            RobustKernel::Huber(rho) => {
                put("robust_kernel", "huber".into());
                put("rho_ker", rho.to_string());
            }
            RobustKernel::Quadratic => put("robust_kernel", "none".into()),
        }
        put("b_max", b.kd.b_max.to_string());
        put("b_min", b.kd.b_min.to_string());
        if let Some(sensor) = &self.sensor {
            put("sensor", sensor.clone());
        }
        put("beam_divergence", b.beam.divergence.to_string());
        put("beam_rings", b.beam.rings.to_string());
        put("beam_rays_per_ring", b.beam.rays_per_ring.to_string());
        put("sigma_floor", b.sigma_floor.to_string());
        put("sigma_cap", b.sigma_cap.to_string());
        put("uncertainty", if b.uncertainty { "on" } else { "off" }.into());
        put("pose_only", if b.pose_only { "on" } else { "off" }.into());
        put("outer_iterations", b.outer_iterations.to_string());
        put("inner_iterations", b.lm.max_iterations.to_string());
        put("convergence_tol", b.lm.convergence_tol.to_string());
        put("outer_tol", b.outer_tol.to_string());
        put("min_scans_per_surfel", b.min_scans_per_surfel.to_string());
        put("ate_max_dt", b.ate_max_dt.to_string());
        put("execution", if b.exec == Execution::Sequential { "sequential" } else { "parallel" }.into());
        put("threads", self.threads.to_string());
        put("seed", self.seed.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "# scans\nclouds = scans\ninitial_trajectory = init.tum\n";

    #[test]
    fn parses_and_rejects() {
        let kv = KeyValues::parse("a = 1\n\n# c\n b=two words \n").unwrap();
        assert_eq!(kv.get("a"), Some("1"));
        assert_eq!(kv.get("b"), Some("two words"));
        assert!(matches!(KeyValues::parse("novalue"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(KeyValues::parse("a=1\na=2"), Err(ConfigError::Syntax { line: 2, .. })));
        assert!(matches!(KeyValues::parse("a b = 1"), Err(ConfigError::Syntax { .. })));
    }

    #[test]
    fn defaults_follow_the_parameter_table() {
        let cfg = PipelineConfig::from_key_values(KeyValues::parse(MINIMAL).unwrap(), Path::new("/data")).unwrap();
        assert_eq!(cfg.clouds, PathBuf::from("/data/scans"));
        assert_eq!(cfg.output_dir, PathBuf::from("/data/out"));
        let b = &cfg.ba;
        assert_eq!(b.thresholds.d_e, 0.5);
        assert_eq!(b.thresholds.d_n, 1.0);
        assert!((b.thresholds.d_theta - 5f64.to_radians()).abs() < 1e-15);
        assert_eq!(b.kernel, RobustKernel::Huber(0.1));
        assert_eq!(b.kd, KdParams { b_max: 0.2, b_min: 0.1 });
        assert!(b.uncertainty && !b.pose_only);
        assert_eq!(b.beam.n_samples(), 37);
    }

    #[test]
    fn overrides_and_round_trip() {
        let mut kv = KeyValues::parse(MINIMAL).unwrap();
        for o in ["uncertainty=off", "pose_only = on", "sensor=hdl-64e", "robust_kernel=none", "execution=sequential"] {
            kv.set_pair(o).unwrap();
        }
        let cfg = PipelineConfig::from_key_values(kv, Path::new("/x")).unwrap();
        assert!(!cfg.ba.uncertainty && cfg.ba.pose_only);
        assert_eq!(cfg.ba.beam.divergence, 2e-3);
        assert_eq!(cfg.ba.kernel, RobustKernel::Quadratic);
        let again = PipelineConfig::from_key_values(KeyValues::parse(&cfg.to_text()).unwrap(), Path::new("/elsewhere"))
            .unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn constraints_enforced_at_load() {
        for bad in ["b_min = 0.3", "d_e = -1", "sigma_floor = 2", "uncertainty = maybe", "sensor = nope", "bogus = 1"] {
            let text = format!("{MINIMAL}{bad}\n");
            assert!(
                PipelineConfig::from_key_values(KeyValues::parse(&text).unwrap(), Path::new(".")).is_err(),
                "{bad}"
            );
        }
        let missing = KeyValues::parse("clouds = a").unwrap();
        assert_eq!(
            PipelineConfig::from_key_values(missing, Path::new(".")).unwrap_err(),
            ConfigError::Missing("initial_trajectory".into())
        );
    }
}
