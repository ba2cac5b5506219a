//! Batch LiDAR bundle adjustment over a surfel map.
//!
//! The pipeline builds one PCA kd-tree per scan, groups tree leaves across
//! scans into surfels, and jointly refines scan poses and surfel offsets
//! with a Huber-robustified point-to-plane cost. Each residual is weighted
//! by a range standard deviation obtained by casting a diverging beam cone
//! against the leaf plane.
//!
//! Module map:
//!
//! - [`geometry`]: SE(3) poses, exponential map, Horn alignment.
//! - [`cloud_io`]: point cloud, trajectory and surfel map files.
//! - [`kdtree`]: PCA kd-tree with exact nearest-leaf queries.
//! - [`beam`]: beam-divergence range uncertainty.
//! - [`association`]: cross-scan leaf grouping.
//! - [`surfel`]: surfel creation, normal refresh, offset commit.
//! - [`solver`]: factor graph, Levenberg-Marquardt, and the outer loop.
//! - [`evaluation`]: trajectory/map metrics and synthetic scenes.
//! - [`config`]: flat key-value configuration files.
//! - [`exec`]: sequential or rayon-backed execution of the inner loops.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod association;
pub mod beam;
pub mod cloud_io;
pub mod config;
pub mod evaluation;
pub mod exec;
pub mod geometry;
pub mod kdtree;
pub mod solver;
pub mod surfel;

mod error;

pub use error::{Error, Result};
pub use exec::Execution;
pub use geometry::{Pose, Twist, Vec3};
