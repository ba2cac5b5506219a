//! Joint pose/surfel optimization.
//!
//! [`factor`] holds the point-to-plane residual and its derivatives,
//! [`graph`] the Levenberg-Marquardt solver over poses and surfel offsets,
//! and [`pipeline`] the outer loop that re-associates leaves and rebuilds
//! surfels between solves.

pub mod factor;
pub mod graph;
pub mod pipeline;

use thiserror::Error;

pub use factor::{huber_cost, jacobians, residual, RobustKernel};
pub use graph::{Factor, FactorGraph, LmReport, LmSettings};
pub use pipeline::{run_mad_ba, write_metrics_csv, BaConfig, BaOutput, IterationMetrics};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("non-finite cost {cost} at {stage}")]
    NonFiniteCost { stage: String, cost: f64 },
    #[error("rank-deficient system; unconstrained poses {poses:?}")]
    RankDeficient { poses: Vec<usize> },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("{0}")]
    Evaluation(String),
}
