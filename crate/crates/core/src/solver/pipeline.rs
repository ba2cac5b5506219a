//! Outer bundle-adjustment loop: re-associate leaves under the current
//! poses, create or refresh surfels, optimize, commit offsets, repeat.
//!
//! A surfel whose group of leaves is unchanged from the previous iteration
//! keeps its committed center and only has its normal refreshed, so a
//! converged solution is a fixed point of the loop.

use std::fmt::Write as _;
use std::path::Path;

use super::factor::RobustKernel;
use super::graph::{Factor, FactorGraph, LmSettings};
use super::SolverError;
use crate::association::{associate, MatchThresholds};
use crate::beam::{normalize_sigmas, simulate_sigma, BeamSpec, SigmaNormalization};
use crate::cloud_io::{Cloud, CloudIoError, Trajectory};
use crate::evaluation::ate;
use crate::exec::Execution;
use crate::geometry::{Pose, Vec3};
use crate::kdtree::{KdParams, KdTree, TreeView};
use crate::surfel::{commit_offsets, update_surfels, SurfelSet};

#[derive(Clone, Debug, PartialEq)]
pub struct BaConfig {
    pub kd: KdParams,
    pub thresholds: MatchThresholds,
    pub kernel: RobustKernel,
    pub beam: BeamSpec,
    pub sigma_floor: f64,
    pub sigma_cap: f64,
    /// When false every factor gets unit sigma.
    pub uncertainty: bool,
    /// Keep surfel offsets at zero and optimize poses only.
    pub pose_only: bool,
    pub outer_iterations: usize,
    /// Stop once the total cost changes by less than this fraction between
    /// outer iterations.
    pub outer_tol: f64,
    pub lm: LmSettings,
    /// Surfels seen by fewer distinct scans carry no relative information
    /// and are left out of the graph.
    pub min_scans_per_surfel: usize,
    /// Timestamp tolerance for ATE against ground truth, seconds.
    pub ate_max_dt: f64,
    pub exec: Execution,
}

impl Default for BaConfig {
    fn default() -> Self {
        BaConfig {
            kd: KdParams::default(),
            thresholds: MatchThresholds::default(),
            kernel: RobustKernel::Huber(0.1),
            beam: BeamSpec::default(),
            sigma_floor: 1e-3,
            sigma_cap: 1.0,
            uncertainty: true,
            pose_only: false,
            outer_iterations: 10,
            outer_tol: 1e-4,
            lm: LmSettings::default(),
            min_scans_per_surfel: 2,
            ate_max_dt: 0.05,
            exec: Execution::default(),
        }
    }
}

impl BaConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.kd.validate()?;
        self.thresholds.validate()?;
        self.beam.validate()?;
        if let RobustKernel::Huber(rho) = self.kernel {
            if !(rho > 0.0 && rho.is_finite()) {
                return Err(format!("rho_ker must be positive, got {rho}"));
            }
        }
        if !(self.sigma_floor > 0.0 && self.sigma_floor < self.sigma_cap && self.sigma_cap.is_finite()) {
            return Err(format!("need 0 < sigma_floor < sigma_cap, got {} / {}", self.sigma_floor, self.sigma_cap));
        }
        if self.outer_iterations == 0 || self.lm.max_iterations == 0 {
            return Err("iteration caps must be at least 1".into());
        }
        if !(self.outer_tol >= 0.0 && self.lm.convergence_tol >= 0.0) {
            return Err("convergence tolerances must be non-negative".into());
        }
        if self.min_scans_per_surfel == 0 {
            return Err("min_scans_per_surfel must be at least 1".into());
        }
        Ok(())
    }
}

/// One row per outer iteration; row 0 describes the initial state.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub total_cost: f64,
    pub ate_rms: Option<f64>,
    pub surfels: usize,
    pub factors: usize,
    pub inner_iterations: usize,
    /// Largest angle between a surfel's displacement and its normal,
    /// radians.
    pub max_displacement_angle: f64,
}

#[derive(Clone, Debug)]
pub struct BaOutput {
    pub trajectory: Trajectory,
    /// Surfels of the last iteration with offsets committed.
    pub surfels: SurfelSet,
    pub metrics: Vec<IterationMetrics>,
    /// Accepted-cost trace of every inner solve.
    pub cost_traces: Vec<Vec<f64>>,
    pub converged: bool,
    /// `None` when uncertainty is off.
    pub sigma_normalization: Option<SigmaNormalization>,
}

impl BaOutput {
    /// Outer iterations actually run.
    pub fn iterations(&self) -> usize {
        self.metrics.len().saturating_sub(1)
    }
}

/// Writes `iteration,total_cost,ate_rms`; the last column is empty without
/// ground truth.
pub fn write_metrics_csv(metrics: &[IterationMetrics], path: &Path) -> Result<(), CloudIoError> {
    let mut out = String::from("iteration,total_cost,ate_rms\n");
    for m in metrics {
        let ate = m.ate_rms.map(|a| format!("{a}")).unwrap_or_default();
        let _ = writeln!(out, "{},{},{}", m.iteration, m.total_cost, ate);
    }
    std::fs::write(path, out).map_err(|source| CloudIoError::Io { path: path.to_path_buf(), source })
}

/// Normalized sigma per leaf of every tree.
fn leaf_sigmas(trees: &mut [KdTree], config: &BaConfig) -> (Vec<Vec<f64>>, Option<SigmaNormalization>) {
    if !config.uncertainty {
        return (trees.iter().map(|t| vec![1.0; t.leaf_count()]).collect(), None);
    }
    let raw: Vec<Vec<_>> =
        trees.iter().map(|t| config.exec.map(t.leaves(), |l| simulate_sigma(l, &config.beam))).collect();
    let flat: Vec<_> = raw.iter().flatten().copied().collect();
    if flat.is_empty() {
        return (trees.iter().map(|_| Vec::new()).collect(), None);
    }
    let (norm, _) = normalize_sigmas(&flat, config.sigma_floor, config.sigma_cap);
    let mut out = Vec::with_capacity(trees.len());
    for (tree, sig) in trees.iter_mut().zip(&raw) {
        let mut row = Vec::with_capacity(sig.len());
        for (leaf, s) in tree.leaves_mut().iter_mut().zip(sig) {
            leaf.sigma = norm.apply(*s) * norm.scale;
            row.push(norm.apply(*s));
        }
        out.push(row);
    }
    (out, Some(norm))
}

fn trajectory_ate(traj: &Trajectory, gt: Option<&Trajectory>, max_dt: f64) -> Result<Option<f64>, SolverError> {
    gt.map(|g| ate(traj, g, max_dt).map(|(rms, _)| rms)).transpose().map_err(|e| SolverError::Evaluation(e.to_string()))
}

/// Displacements shorter than this fraction of the center's distance from
/// the origin are below what f64 coordinates can resolve to 1e-9 rad.
const DISPLACEMENT_RESOLUTION: f64 = 1e-6;

/// Angle between the move `from -> to` and the line spanned by `n`.
/// Moves too short to carry a direction at f64 precision count as zero.
fn displacement_angle(from: &Vec3, to: &Vec3, n: &Vec3) -> f64 {
    let d = to - from;
    if d.norm() <= DISPLACEMENT_RESOLUTION * from.norm().max(1.0) {
        return 0.0;
    }
    d.cross(n).norm().atan2(d.dot(n).abs())
}

/// Graph over the surfels seen by enough scans. Returns it with the index
/// of each graph surfel in `set`.
fn build_graph(
    set: &SurfelSet,
    views: &[TreeView<'_>],
    sigmas: &[Vec<f64>],
    poses: &[Pose],
    config: &BaConfig,
) -> Result<(FactorGraph, Vec<usize>), SolverError> {
    let used: Vec<usize> = (0..set.len())
        .filter(|&i| {
            let mut scans: Vec<u32> = set.surfels[i].members.iter().map(|m| m.scan).collect();
            scans.sort_unstable();
            scans.dedup();
            scans.len() >= config.min_scans_per_surfel
        })
        .collect();
    let chosen: Vec<_> = used.iter().map(|&i| set.surfels[i].clone()).collect();
    let mut graph = FactorGraph::new(poses.to_vec(), &chosen, config.kernel);
    graph.set_optimize_offsets(!config.pose_only);
    let mut observed = vec![false; poses.len()];
    for (gi, s) in chosen.iter().enumerate() {
        for m in &s.members {
            let (k, l) = (m.scan as usize, m.leaf as usize);
            observed[k] = true;
            graph.add_factor(Factor { scan: k, surfel: gi, point: views[k].local(l).mean, sigma: sigmas[k][l] })?;
        }
    }
    for (k, seen) in observed.iter().enumerate() {
        if !seen && !graph.is_fixed(k) {
            log::warn!("scan {k} shares no surfel with other scans; its pose is held fixed");
            graph.fix_pose(k);
        }
    }
    Ok((graph, used))
}

/// Alternates association and joint optimization of poses and surfels.
/// `initial` holds sensor-to-world poses in cloud order.
pub fn run_mad_ba(
    clouds: &[Cloud],
    initial: &Trajectory,
    config: &BaConfig,
    ground_truth: Option<&Trajectory>,
) -> Result<BaOutput, SolverError> {
    config.validate().map_err(SolverError::InvalidInput)?;
    if clouds.is_empty() || clouds.len() != initial.len() {
        return Err(SolverError::InvalidInput(format!(
            "{} clouds for {} trajectory poses",
            clouds.len(),
            initial.len()
        )));
    }
    let exec = config.exec;
    let mut trees: Vec<KdTree> = clouds.iter().map(|c| KdTree::build(c, config.kd, exec)).collect();
    let (sigmas, sigma_normalization) = leaf_sigmas(&mut trees, config);
    if let Some(n) = &sigma_normalization {
        log::info!("sigma median {:.4e} m", n.scale);
    }

    let mut poses = initial.poses().to_vec();
    let mut metrics = Vec::new();
    let mut cost_traces = Vec::new();
    let mut surfels = SurfelSet::default();
    let mut converged = false;
    let mut previous_cost: Option<f64> = None;

    for it in 1..=config.outer_iterations {
        let views: Vec<TreeView<'_>> = trees.iter().zip(&poses).map(|(t, p)| t.view(*p)).collect();
        let groups = associate(&views, &config.thresholds, exec);
        let (next, carried) = update_surfels(&surfels, &groups, &views, exec);
        surfels = next;
        let (mut graph, used) = build_graph(&surfels, &views, &sigmas, &poses, config)?;
        let initial_cost = graph.total_cost(exec);
        if !initial_cost.is_finite() {
            return Err(SolverError::NonFiniteCost { stage: format!("outer iteration {it}"), cost: initial_cost });
        }
        if it == 1 {
            metrics.push(IterationMetrics {
                iteration: 0,
                total_cost: initial_cost,
                ate_rms: trajectory_ate(initial, ground_truth, config.ate_max_dt)?,
                surfels: surfels.len(),
                factors: graph.factors().len(),
                inner_iterations: 0,
                max_displacement_angle: 0.0,
            });
            previous_cost = Some(initial_cost);
        }
        if graph.factors().is_empty() {
            log::warn!("no surfel is shared between scans; nothing to optimize");
            converged = true;
            break;
        }
        let report = graph.optimize(&config.lm, exec).map_err(|e| match e {
            SolverError::NonFiniteCost { stage, cost } => {
                SolverError::NonFiniteCost { stage: format!("outer iteration {it}, {stage}"), cost }
            }
            other => other,
        })?;

        let before: Vec<(Vec3, Vec3)> =
            used.iter().map(|&i| (surfels.surfels[i].center, surfels.surfels[i].normal)).collect();
        for (gi, &i) in used.iter().enumerate() {
            surfels.surfels[i].offset = graph.offsets()[gi];
        }
        commit_offsets(&mut surfels);
        let max_angle = used
            .iter()
            .zip(&before)
            .map(|(&i, (c, n))| displacement_angle(c, &surfels.surfels[i].center, n))
            .fold(0.0, f64::max);

        poses = graph.poses().to_vec();
        let traj = initial.with_poses(poses.clone());
        let cost = report.final_cost();
        metrics.push(IterationMetrics {
            iteration: it,
            total_cost: cost,
            ate_rms: trajectory_ate(&traj, ground_truth, config.ate_max_dt)?,
            surfels: surfels.len(),
            factors: graph.factors().len(),
            inner_iterations: report.iterations,
            max_displacement_angle: max_angle,
        });
        log::info!(
            "iteration {it}: cost {cost:.6e}, {} factors, {} of {} surfels carried over, {} inner steps",
            graph.factors().len(),
            carried,
            surfels.len(),
            report.iterations
        );
        cost_traces.push(report.cost_trace);

        let prev = previous_cost.replace(cost).unwrap_or(cost);
        let change = if prev > 0.0 { (prev - cost).abs() / prev } else { 0.0 };
        if change < config.outer_tol {
            converged = true;
            break;
        }
    }

    Ok(BaOutput {
        trajectory: initial.with_poses(poses),
        surfels,
        metrics,
        cost_traces,
        converged,
        sigma_normalization,
    })
}
