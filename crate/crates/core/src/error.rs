use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),
    #[error("mixing weight {0} outside [0, 1]")]
    MixWeight(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("interaction gradient disagrees with finite differences: {0}")]
    GradientCheck(String),
    #[error("invalid time grid: {0}")]
    Grid(String),
    #[error("time grids do not match")]
    GridMismatch,
    #[error("time {0} is not a grid point")]
    NotGridPoint(f64),
    #[error("state at step {0} was not recorded")]
    NotRecorded(usize),
    #[error("non-finite state at t = {0}")]
    BlowUp(f64),
    #[error("every path blew up; first at path {path}, step {step}")]
    AllPathsInvalid { path: usize, step: usize },
    #[error("{what} did not converge in {iterations} iterations; distances {history:?}")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        history: Vec<f64>,
    },
    #[error("matrix is singular")]
    Singular,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
