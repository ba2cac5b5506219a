//! Trajectory and map metrics, plus synthetic scenes with known ground
//! truth.

pub mod map;
pub mod scene;
pub mod trajectory;

use std::fmt::Write as _;

use thiserror::Error;

pub use map::{map_metrics, MapMetrics, PointIndex};
pub use scene::{generate_scene, perturb_poses, Panel, Scene, ScenePreset, SceneSpec};
pub use trajectory::{associate_timestamps, ate, ate_stats, residual_stats, AteStats};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("only {pairs} pose pairs within the time tolerance; need at least 3")]
    InsufficientOverlap { pairs: usize },
    #[error("no point pair within the overlap threshold")]
    NoOverlap,
    #[error("{0} cloud is empty")]
    EmptyCloud(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("scan {0} has no returns; the trajectory leaves the scene")]
    EmptyScan(usize),
}

/// Combined report; either half may be absent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub ate: Option<AteStats>,
    pub map: Option<MapMetrics>,
}

impl EvalReport {
    /// Human-readable summary. Lengths in meters for ATE, centimeters for
    /// map metrics, percent for the F-score.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(a) = &self.ate {
            let _ = writeln!(s, "ate_rms_m {:.9}", a.rms);
            let _ = writeln!(s, "ate_max_m {:.9}", a.max);
            let _ = writeln!(s, "matched_poses {}", a.pairs);
        }
        if let Some(m) = &self.map {
            let _ = writeln!(s, "accuracy_cm {:.6}", m.accuracy);
            let _ = writeln!(s, "completion_cm {:.6}", m.completion);
            let _ = writeln!(s, "chamfer_l1_cm {:.6}", m.chamfer_l1);
            let _ = writeln!(s, "f_score_pct {:.6}", m.f_score);
            let _ = writeln!(s, "excluded_map_points {}", m.excluded_map);
            let _ = writeln!(s, "excluded_gt_points {}", m.excluded_gt);
        }
        s
    }

    /// Two-line CSV: header and values; absent halves are left out.
    pub fn to_csv(&self) -> String {
        let mut head = Vec::new();
        let mut vals = Vec::new();
        if let Some(a) = &self.ate {
            head.extend(["ate_rms_m", "ate_max_m", "matched_poses"]);
            vals.extend([a.rms.to_string(), a.max.to_string(), a.pairs.to_string()]);
        }
        if let Some(m) = &self.map {
            head.extend([
                "accuracy_cm",
                "completion_cm",
                "chamfer_l1_cm",
                "f_score_pct",
                "excluded_map_points",
                "excluded_gt_points",
            ]);
            vals.extend([
                m.accuracy.to_string(),
                m.completion.to_string(),
                m.chamfer_l1.to_string(),
                m.f_score.to_string(),
                m.excluded_map.to_string(),
                m.excluded_gt.to_string(),
            ]);
        }
        format!("{}\n{}\n", head.join(","), vals.join(","))
    }
}
