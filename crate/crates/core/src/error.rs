use thiserror::Error;

use crate::featext::ExtractError;
use crate::featsel::SelectError;
use crate::lk::SolverError;
use crate::tensor::TensorError;
use crate::warp::WarpError;

/// Umbrella error for the experiment drivers that touch several modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error("image i/o: {0}")]
    Image(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
