//! Absolute trajectory error.

use super::EvalError;
use crate::cloud_io::Trajectory;
use crate::geometry::{horn_fit, Pose, Vec3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AteStats {
    pub rms: f64,
    pub max: f64,
    pub pairs: usize,
    /// Transform applied to the estimate before measuring.
    pub alignment: Pose,
}

/// Pairs each estimate timestamp with the nearest reference timestamp no
/// further than `max_dt` away. Returns `(estimate, reference)` indices.
pub fn associate_timestamps(est: &[f64], reference: &[f64], max_dt: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, &t) in est.iter().enumerate() {
        let j = reference.partition_point(|&r| r < t);
        let best = [j.checked_sub(1), (j < reference.len()).then_some(j)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (reference[a] - t).abs().total_cmp(&(reference[b] - t).abs()));
        if let Some(j) = best {
            if (reference[j] - t).abs() <= max_dt {
                out.push((i, j));
            }
        }
    }
    out
}

/// Root mean square and maximum of residual lengths.
pub fn residual_stats(residuals: &[f64]) -> (f64, f64) {
    if residuals.is_empty() {
        return (0.0, 0.0);
    }
    let ms = residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64;
    (ms.sqrt(), residuals.iter().fold(0.0f64, |m, r| m.max(r.abs())))
}

/// ATE after aligning the estimate to the reference by a rigid transform.
pub fn ate_stats(est: &Trajectory, reference: &Trajectory, max_dt: f64) -> Result<AteStats, EvalError> {
    if !(max_dt >= 0.0) {
        return Err(EvalError::InvalidParameter(format!("max_dt must be non-negative, got {max_dt}")));
    }
    let pairs = associate_timestamps(est.timestamps(), reference.timestamps(), max_dt);
    if pairs.len() < 3 {
        return Err(EvalError::InsufficientOverlap { pairs: pairs.len() });
    }
    let src: Vec<Vec3> = pairs.iter().map(|&(i, _)| est.poses()[i].translation).collect();
    let dst: Vec<Vec3> = pairs.iter().map(|&(_, j)| reference.poses()[j].translation).collect();
    let alignment = horn_fit(&src, &dst);
    let residuals: Vec<f64> = src.iter().zip(&dst).map(|(s, d)| (alignment.apply_point(s) - d).norm()).collect();
    let (rms, max) = residual_stats(&residuals);
    Ok(AteStats { rms, max, pairs: pairs.len(), alignment })
}

/// `(rms, max)` translational ATE in meters.
pub fn ate(est: &Trajectory, reference: &Trajectory, max_dt: f64) -> Result<(f64, f64), EvalError> {
    ate_stats(est, reference, max_dt).map(|s| (s.rms, s.max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_exp, Twist};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn helix(n: usize) -> Trajectory {
        let poses = (0..n)
            .map(|i| {
                let a = i as f64 * 0.3;
                se3_exp(&Twist::new(Vec3::new(3.0 * a.cos(), 2.0 * a.sin(), 0.1 * i as f64), Vec3::new(0.0, 0.0, a)))
            })
            .collect();
        Trajectory::new((0..n).map(|i| 100.0 + i as f64 * 0.1).collect(), poses).unwrap()
    }

    #[test]
    fn identical_and_rigidly_moved() {
        let gt = helix(20);
        let (rms, max) = ate(&gt, &gt, 0.05).unwrap();
        assert!(rms < 1e-12 && max < 1e-12);
        let g = se3_exp(&Twist::new(Vec3::new(5.0, -1.0, 2.0), Vec3::new(0.3, -0.2, 1.1)));
        let moved = gt.with_poses(gt.poses().iter().map(|p| g.compose(p)).collect());
        let (rms, max) = ate(&moved, &gt, 0.05).unwrap();
        assert!(rms < 1e-9 && max < 1e-9, "{rms} {max}");
    }

    #[test]
    fn residual_arithmetic() {
        let (rms, max) = residual_stats(&[0.1, 0.3]);
        assert_relative_eq!(rms, 0.05f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(rms, 0.2236, epsilon = 1e-4);
        assert_eq!(max, 0.3);
    }

    #[test]
    fn straight_line_is_aligned() {
        let poses: Vec<Pose> = (0..5).map(|i| Pose::from_translation(Vec3::new(i as f64, 0.0, 0.0))).collect();
        let t = Trajectory::from_poses(poses);
        let (rms, _) = ate(&t, &t, 0.05).unwrap();
        assert!(rms < 1e-12);
    }

    #[test]
    fn association_window() {
        let pairs = associate_timestamps(&[0.0, 1.0, 2.04, 3.2], &[0.01, 1.0, 2.0, 3.0], 0.05);
        assert_eq!(pairs, vec![(0, 0), (1, 1), (2, 2)]);
        let gt = helix(5);
        let shifted = Trajectory::new(gt.timestamps().iter().map(|t| t + 1.0).collect(), gt.poses().to_vec()).unwrap();
        assert_eq!(ate(&shifted, &gt, 0.05), Err(EvalError::InsufficientOverlap { pairs: 0 }));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn rigid_invariance(
            t in prop::array::uniform3(-20.0f64..20.0),
            w in prop::array::uniform3(-3.0f64..3.0),
            noise in prop::collection::vec(prop::array::uniform3(-0.2f64..0.2), 12),
        ) {
            let gt = helix(12);
            let est = gt.with_poses(
                gt.poses().iter().zip(&noise).map(|(p, n)| Pose::new(p.rotation, p.translation + Vec3::from(*n))).collect(),
            );
            let g = se3_exp(&Twist::new(Vec3::from(t), Vec3::from(w)));
            let moved = est.with_poses(est.poses().iter().map(|p| g.compose(p)).collect());
            let (a, b) = (ate(&est, &gt, 0.05).unwrap(), ate(&moved, &gt, 0.05).unwrap());
            prop_assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
        }
    }
}
