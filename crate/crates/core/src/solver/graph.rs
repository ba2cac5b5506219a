//! Levenberg-Marquardt over scan poses and scalar surfel offsets.
//!
//! Each iteration linearizes every factor with IRLS weights, damps the
//! normal equations, eliminates the offsets by Schur complement and solves
//! the reduced pose system with a dense Cholesky factorization. Pose 0 is
//! the gauge and is never modified.

use nalgebra::{DMatrix, DVector, Vector6};

use super::factor::{pose_jacobian, residual_world, RobustKernel};
use super::SolverError;
use crate::exec::{pairwise_sum, Execution};
use crate::geometry::{Pose, Twist, Vec3};
use crate::surfel::Surfel;

type Mat6 = nalgebra::Matrix6<f64>;

/// Damping never scales a diagonal entry smaller than this fraction of the
/// largest one.
const DIAG_FLOOR_REL: f64 = 1e-9;
/// Give up on a linearization point once damping exceeds this.
const MAX_LAMBDA: f64 = 1e12;
/// Updates shorter than this (meters and radians stacked) count as zero.
const STEP_TOL: f64 = 1e-12;

/// One observation: leaf mean `point` (sensor frame of `scan`) lying on
/// surfel `surfel`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Factor {
    pub scan: usize,
    pub surfel: usize,
    pub point: Vec3,
    pub sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmSettings {
    pub max_iterations: usize,
    /// Stop once an accepted step lowers the cost by less than this
    /// fraction.
    pub convergence_tol: f64,
    pub initial_lambda: f64,
    pub min_lambda: f64,
}

impl Default for LmSettings {
    fn default() -> Self {
        LmSettings { max_iterations: 20, convergence_tol: 1e-4, initial_lambda: 1e-4, min_lambda: 1e-12 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmReport {
    /// Initial cost followed by the cost after every accepted step.
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    pub accepted: usize,
    pub converged: bool,
    pub final_lambda: f64,
    /// Norm of the last accepted update (poses and offsets stacked).
    pub last_step_norm: f64,
}

impl LmReport {
    pub fn final_cost(&self) -> f64 {
        *self.cost_trace.last().expect("trace holds the initial cost")
    }
}

/// Pose and offset increments of one LM step.
type Update = (Vec<Vector6<f64>>, Vec<f64>);

#[derive(Clone, Debug)]
pub struct FactorGraph {
    poses: Vec<Pose>,
    centers: Vec<Vec3>,
    normals: Vec<Vec3>,
    offsets: Vec<f64>,
    factors: Vec<Factor>,
    fixed: Vec<bool>,
    kernel: RobustKernel,
    optimize_offsets: bool,
}

/// Linearized factor.
struct Linear {
    jac: Vector6<f64>,
    e: f64,
    w: f64,
    cost: f64,
}

/// Undamped normal equations at one linearization point.
struct Normal {
    /// Per-pose diagonal blocks and gradients.
    hpp: Vec<Mat6>,
    gp: Vec<Vector6<f64>>,
    /// Per-surfel offset curvature, gradient and pose couplings.
    hq: Vec<f64>,
    gq: Vec<f64>,
    /// Off-diagonal pose blocks only arise through these couplings, so in
    /// pose-only mode the reduced system is block diagonal.
    coupling: Vec<Vec<(usize, Vector6<f64>)>>,
    cost: f64,
}

impl FactorGraph {
    /// Poses are sensor to world; pose 0 is held fixed.
    pub fn new(poses: Vec<Pose>, surfels: &[Surfel], kernel: RobustKernel) -> Self {
        let mut fixed = vec![false; poses.len()];
        if let Some(f) = fixed.first_mut() {
            *f = true;
        }
        FactorGraph {
            poses,
            centers: surfels.iter().map(|s| s.center).collect(),
            normals: surfels.iter().map(|s| s.normal).collect(),
            offsets: surfels.iter().map(|s| s.offset).collect(),
            factors: Vec::new(),
            fixed,
            kernel,
            optimize_offsets: true,
        }
    }

    pub fn add_factor(&mut self, factor: Factor) -> Result<(), SolverError> {
        if factor.scan >= self.poses.len() || factor.surfel >= self.centers.len() {
            return Err(SolverError::InvalidInput(format!(
                "factor references scan {} / surfel {} outside {} poses / {} surfels",
                factor.scan,
                factor.surfel,
                self.poses.len(),
                self.centers.len()
            )));
        }
        if !(factor.sigma > 0.0 && factor.sigma.is_finite()) || !factor.point.iter().all(|x| x.is_finite()) {
            return Err(SolverError::InvalidInput(format!(
                "factor on scan {} has sigma {} or a non-finite point",
                factor.scan, factor.sigma
            )));
        }
        self.factors.push(factor);
        Ok(())
    }

    /// Pose-only mode keeps every offset at its current value.
    pub fn set_optimize_offsets(&mut self, on: bool) {
        self.optimize_offsets = on;
    }

    pub fn fix_pose(&mut self, k: usize) {
        self.fixed[k] = true;
    }

    pub fn is_fixed(&self, k: usize) -> bool {
        self.fixed[k]
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn kernel(&self) -> RobustKernel {
        self.kernel
    }

    /// Robust cost at the current state.
    pub fn total_cost(&self, exec: Execution) -> f64 {
        self.cost_at(&self.poses, &self.offsets, exec)
    }

    fn cost_at(&self, poses: &[Pose], offsets: &[f64], exec: Execution) -> f64 {
        let costs = exec.map(&self.factors, |f| {
            let n = &self.normals[f.surfel];
            let p = self.centers[f.surfel] + n * offsets[f.surfel];
            let e = residual_world(&poses[f.scan], &p, n, &f.point, 1.0 / f.sigma);
            self.kernel.evaluate(e).0
        });
        pairwise_sum(&costs)
    }

    fn linearize(&self, exec: Execution) -> Vec<Linear> {
        exec.map(&self.factors, |f| {
            let inv = 1.0 / f.sigma;
            let n = &self.normals[f.surfel];
            let pose = &self.poses[f.scan];
            let p = self.centers[f.surfel] + n * self.offsets[f.surfel];
            let e = residual_world(pose, &p, n, &f.point, inv);
            let (cost, w) = self.kernel.evaluate(e);
            Linear { jac: pose_jacobian(pose, n, &f.point, inv), e, w, cost }
        })
    }

    /// Accumulates in factor order.
    fn assemble(&self, lin: &[Linear]) -> Normal {
        let k = self.poses.len();
        let s = self.centers.len();
        let mut sys = Normal {
            hpp: vec![Mat6::zeros(); k],
            gp: vec![Vector6::zeros(); k],
            hq: vec![0.0; s],
            gq: vec![0.0; s],
            coupling: vec![Vec::new(); s],
            cost: pairwise_sum(&lin.iter().map(|l| l.cost).collect::<Vec<_>>()),
        };
        for (f, l) in self.factors.iter().zip(lin) {
            let wj = l.jac * l.w;
            sys.hpp[f.scan] += wj * l.jac.transpose();
            sys.gp[f.scan] += wj * l.e;
            if self.optimize_offsets {
                let jq = 1.0 / f.sigma;
                sys.hq[f.surfel] += l.w * jq * jq;
                sys.gq[f.surfel] += l.w * jq * l.e;
                let c = &mut sys.coupling[f.surfel];
                match c.iter_mut().find(|(scan, _)| *scan == f.scan) {
                    Some((_, v)) => *v += wj * jq,
                    None => c.push((f.scan, wj * jq)),
                }
            }
        }
        sys
    }

    /// Solves the damped system. Returns pose and offset updates, or the
    /// free poses whose reduced blocks are singular.
    fn solve(&self, sys: &Normal, free: &[Option<usize>], n_free: usize, lambda: f64) -> Result<Update, Vec<usize>> {
        let dim = 6 * n_free;
        let max_diag = sys
            .hpp
            .iter()
            .flat_map(|h| h.diagonal().iter().copied().collect::<Vec<_>>())
            .chain(sys.hq.iter().copied())
            .fold(0.0f64, f64::max);
        let floor = (DIAG_FLOOR_REL * max_diag).max(f64::MIN_POSITIVE);
        let damp = |d: f64| d + lambda * d.max(floor);

        let mut a = DMatrix::<f64>::zeros(dim, dim);
        let mut b = DVector::<f64>::zeros(dim);
        for (k, slot) in free.iter().enumerate() {
            let Some(i) = *slot else { continue };
            let mut h = sys.hpp[k];
            for d in 0..6 {
                h[(d, d)] = damp(h[(d, d)]);
            }
            a.view_mut((6 * i, 6 * i), (6, 6)).copy_from(&h);
            b.rows_mut(6 * i, 6).copy_from(&(-sys.gp[k]));
        }
        let hq_d: Vec<f64> = sys.hq.iter().map(|&h| damp(h)).collect();
        if self.optimize_offsets {
            for (s, c) in sys.coupling.iter().enumerate() {
                let inv = 1.0 / hq_d[s];
                for &(k1, w1) in c {
                    let Some(i1) = free[k1] else { continue };
                    let mut rows = b.rows_mut(6 * i1, 6);
                    rows += w1 * (sys.gq[s] * inv);
                    for &(k2, w2) in c {
                        let Some(i2) = free[k2] else { continue };
                        let mut blk = a.view_mut((6 * i1, 6 * i2), (6, 6));
                        blk -= w1 * w2.transpose() * inv;
                    }
                }
            }
        }

        let dp = if dim == 0 {
            DVector::zeros(0)
        } else {
            match a.clone().cholesky() {
                Some(ch) => ch.solve(&b),
                None => return Err(singular_poses(&a, free)),
            }
        };
        let mut pose_steps = vec![Vector6::zeros(); self.poses.len()];
        for (k, slot) in free.iter().enumerate() {
            if let Some(i) = *slot {
                pose_steps[k] = dp.fixed_rows::<6>(6 * i).into_owned();
            }
        }
        let mut offset_steps = vec![0.0; self.centers.len()];
        if self.optimize_offsets {
            for (s, c) in sys.coupling.iter().enumerate() {
                if hq_d[s] <= 0.0 {
                    continue;
                }
                let coupled: f64 = c.iter().map(|(k, w)| w.dot(&pose_steps[*k])).sum();
                offset_steps[s] = -(sys.gq[s] + coupled) / hq_d[s];
            }
        }
        Ok((pose_steps, offset_steps))
    }

    /// Runs LM from the current state. Accepted steps never raise the cost.
    pub fn optimize(&mut self, settings: &LmSettings, exec: Execution) -> Result<LmReport, SolverError> {
        let mut observed = vec![false; self.poses.len()];
        for f in &self.factors {
            observed[f.scan] = true;
        }
        let unconstrained: Vec<usize> = (0..self.poses.len()).filter(|&k| !self.fixed[k] && !observed[k]).collect();
        if !unconstrained.is_empty() {
            return Err(SolverError::RankDeficient { poses: unconstrained });
        }
        let mut free = vec![None; self.poses.len()];
        let mut n_free = 0;
        for (k, slot) in free.iter_mut().enumerate() {
            if !self.fixed[k] {
                *slot = Some(n_free);
                n_free += 1;
            }
        }

        let mut lin = self.linearize(exec);
        let mut sys = self.assemble(&lin);
        if !sys.cost.is_finite() {
            return Err(SolverError::NonFiniteCost { stage: "initial state".into(), cost: sys.cost });
        }
        let mut report = LmReport {
            cost_trace: vec![sys.cost],
            iterations: 0,
            accepted: 0,
            converged: false,
            final_lambda: settings.initial_lambda,
            last_step_norm: 0.0,
        };
        let mut lambda = settings.initial_lambda;
        while report.iterations < settings.max_iterations {
            report.iterations += 1;
            let (dp, dq) =
                self.solve(&sys, &free, n_free, lambda).map_err(|poses| SolverError::RankDeficient { poses })?;
            let poses: Vec<Pose> = self
                .poses
                .iter()
                .enumerate()
                .map(|(k, p)| if self.fixed[k] { *p } else { p.retract(&Twist(dp[k])) })
                .collect();
            let offsets: Vec<f64> = self.offsets.iter().zip(&dq).map(|(q, d)| q + d).collect();
            let cost = self.cost_at(&poses, &offsets, exec);
            let current = sys.cost;
            let step_norm =
                (dp.iter().map(|d| d.norm_squared()).sum::<f64>() + dq.iter().map(|d| d * d).sum::<f64>()).sqrt();
            if step_norm < STEP_TOL {
                // Already stationary; the cost can only move by round-off.
                if cost.is_finite() && cost <= current {
                    self.poses = poses;
                    self.offsets = offsets;
                    report.accepted += 1;
                    report.cost_trace.push(cost);
                }
                report.last_step_norm = step_norm;
                report.converged = true;
                break;
            }
            if cost.is_finite() && cost <= current {
                self.poses = poses;
                self.offsets = offsets;
                report.accepted += 1;
                report.cost_trace.push(cost);
                report.last_step_norm = step_norm;
                lambda = (lambda / 10.0).max(settings.min_lambda);
                let decrease = if current > 0.0 { (current - cost) / current } else { 0.0 };
                if decrease < settings.convergence_tol {
                    report.converged = true;
                    break;
                }
                lin = self.linearize(exec);
                sys = self.assemble(&lin);
            } else {
                lambda *= 10.0;
                if lambda > MAX_LAMBDA {
                    // No descent left at this point: a local minimum up to
                    // round-off.
                    report.converged = true;
                    break;
                }
            }
        }
        report.final_lambda = lambda;
        log::debug!(
            "LM: {} iterations, {} accepted, cost {:.6e} -> {:.6e}",
            report.iterations,
            report.accepted,
            report.cost_trace[0],
            report.final_cost()
        );
        Ok(report)
    }
}

/// Free poses whose damped reduced diagonal block is not positive definite.
fn singular_poses(a: &DMatrix<f64>, free: &[Option<usize>]) -> Vec<usize> {
    let bad: Vec<usize> = free
        .iter()
        .enumerate()
        .filter_map(|(k, slot)| {
            let i = (*slot)?;
            let blk = a.view((6 * i, 6 * i), (6, 6)).into_owned();
            (blk.cholesky().is_none()).then_some(k)
        })
        .collect();
    if bad.is_empty() {
        free.iter().enumerate().filter_map(|(k, s)| s.map(|_| k)).collect()
    } else {
        bad
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::se3_exp;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Planes with varied normals so every pose direction is observed.
    fn planes() -> Vec<Surfel> {
        let normals = [
            Vec3::x(),
            Vec3::y(),
            Vec3::z(),
            Vec3::new(1.0, 1.0, 0.0).normalize(),
            Vec3::new(0.0, 1.0, 1.0).normalize(),
            Vec3::new(1.0, 0.0, 1.0).normalize(),
        ];
        let mut out = Vec::new();
        for (i, n) in normals.iter().enumerate() {
            let d = 3.0 + i as f64;
            out.push(Surfel::new(n * d, *n, 0.2, vec![]));
            out.push(Surfel::new(-n * d, *n, 0.2, vec![]));
        }
        out
    }

    /// Points on each plane, expressed in the sensor frame of `pose`.
    fn observe(graph: &mut FactorGraph, surfels: &[Surfel], scan: usize, pose: &Pose, rng: &mut ChaCha8Rng) {
        let inv = pose.inverse();
        for (s, sf) in surfels.iter().enumerate() {
            let t1 = sf.normal.cross(&Vec3::new(0.3, 0.5, 0.8)).normalize();
            let t2 = sf.normal.cross(&t1);
            for _ in 0..4 {
                let w = sf.center + t1 * rng.random_range(-1.0..1.0) + t2 * rng.random_range(-1.0..1.0);
                graph.add_factor(Factor { scan, surfel: s, point: inv.apply_point(&w), sigma: 1.0 }).unwrap();
            }
        }
    }

    fn two_scan(perturb: &Twist, kernel: RobustKernel) -> (FactorGraph, Pose) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let surfels = planes();
        let gt = se3_exp(&Twist::new(Vec3::new(0.5, 0.2, 0.0), Vec3::new(0.0, 0.0, 0.1)));
        let init = gt.retract(perturb);
        let mut graph = FactorGraph::new(vec![Pose::identity(), init], &surfels, kernel);
        observe(&mut graph, &surfels, 0, &Pose::identity(), &mut rng);
        observe(&mut graph, &surfels, 1, &gt, &mut rng);
        (graph, gt)
    }

    #[test]
    fn zero_residual_is_a_fixed_point() {
        let (mut graph, gt) = two_scan(&Twist::zero(), RobustKernel::Huber(0.1));
        let before = graph.poses().to_vec();
        let report = graph.optimize(&LmSettings::default(), Execution::Sequential).unwrap();
        assert!(report.converged);
        assert_eq!(report.iterations, 1);
        assert!(report.last_step_norm < 1e-12);
        assert_eq!(graph.poses()[0], before[0]);
        assert_relative_eq!(graph.poses()[1].translation, gt.translation, epsilon = 1e-12);
    }

    #[test]
    fn recovers_perturbed_pose() {
        let delta = Twist::new(Vec3::new(0.06, -0.05, 0.05), Vec3::new(0.02, -0.02, 0.0185));
        let (mut graph, gt) = two_scan(&delta, RobustKernel::Quadratic);
        graph.set_optimize_offsets(false);
        let p0 = graph.poses()[0];
        let settings = LmSettings { max_iterations: 50, convergence_tol: 1e-14, ..LmSettings::default() };
        let report = graph.optimize(&settings, Execution::Parallel).unwrap();
        let got = graph.poses()[1];
        assert!((got.translation - gt.translation).norm() < 1e-6);
        assert!(got.inverse().compose(&gt).rotation_angle() < 1e-6);
        assert_eq!(graph.poses()[0], p0);
        assert!(report.cost_trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(graph.offsets().iter().all(|&q| q == 0.0));
    }

    #[test]
    fn offsets_absorb_a_shifted_plane() {
        // Scan 1 sees one plane 5 cm off; with a robust kernel the offset
        // of that surfel moves instead of dragging the pose.
        let (mut graph, _) = two_scan(&Twist::zero(), RobustKernel::Huber(0.1));
        for f in graph.factors.iter_mut().filter(|f| f.scan == 1 && f.surfel == 0) {
            f.point.x -= 0.05;
        }
        let before = graph.total_cost(Execution::Sequential);
        let report = graph.optimize(&LmSettings::default(), Execution::Sequential).unwrap();
        assert!(report.final_cost() < before);
        assert!(graph.offsets()[0].abs() > 1e-3);
        assert!(report.cost_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let delta = Twist::new(Vec3::new(0.03, 0.01, -0.02), Vec3::new(0.01, 0.0, 0.01));
        let (mut a, _) = two_scan(&delta, RobustKernel::Huber(0.1));
        let mut b = a.clone();
        let ra = a.optimize(&LmSettings::default(), Execution::Sequential).unwrap();
        let rb = b.optimize(&LmSettings::default(), Execution::Parallel).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.poses(), b.poses());
        assert_eq!(a.offsets(), b.offsets());
    }

    #[test]
    fn unobserved_free_pose_is_rank_deficient() {
        let surfels = planes();
        let mut graph = FactorGraph::new(vec![Pose::identity(); 3], &surfels, RobustKernel::Quadratic);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        observe(&mut graph, &surfels, 0, &Pose::identity(), &mut rng);
        observe(&mut graph, &surfels, 1, &Pose::identity(), &mut rng);
        let err = graph.optimize(&LmSettings::default(), Execution::Sequential).unwrap_err();
        assert_eq!(err, SolverError::RankDeficient { poses: vec![2] });
    }

    #[test]
    fn non_finite_cost_is_rejected() {
        let surfels = vec![Surfel::new(Vec3::new(f64::NAN, 0.0, 0.0), Vec3::z(), 0.1, vec![])];
        let mut graph = FactorGraph::new(vec![Pose::identity(); 2], &surfels, RobustKernel::Quadratic);
        graph.add_factor(Factor { scan: 1, surfel: 0, point: Vec3::z(), sigma: 1.0 }).unwrap();
        assert!(matches!(
            graph.optimize(&LmSettings::default(), Execution::Sequential),
            Err(SolverError::NonFiniteCost { .. })
        ));
        assert!(graph.add_factor(Factor { scan: 5, surfel: 0, point: Vec3::z(), sigma: 1.0 }).is_err());
        assert!(graph.add_factor(Factor { scan: 1, surfel: 0, point: Vec3::z(), sigma: 0.0 }).is_err());
    }
}
