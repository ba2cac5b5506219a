use thiserror::Error;

use crate::cloud_io::CloudIoError;
use crate::config::ConfigError;
use crate::evaluation::EvalError;
use crate::geometry::GeometryError;
use crate::solver::SolverError;

/// Crate-level error. Messages carry the name of the module that failed.
#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("cloud_io: {0}")]
    CloudIo(#[from] CloudIoError),
    #[error("ba_solver: {0}")]
    Solver(#[from] SolverError),
    #[error("evaluation: {0}")]
    Eval(#[from] EvalError),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
