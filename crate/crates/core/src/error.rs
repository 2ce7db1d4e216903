use std::path::PathBuf;

use crate::network::BusId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Argument outside the mathematical domain of a cost or utility function.
    #[error("domain error: {0}")]
    Domain(String),

    /// Caller violated an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("topology error: {0}")]
    Topology(String),

    #[error("unknown node {0}")]
    UnknownNode(BusId),

    #[error(
        "power flow diverged after {iterations} iterations (last residual {residual:.3e} p.u.)"
    )]
    PowerFlowDiverged { iterations: usize, residual: f64 },

    #[error("infeasible market: {0}")]
    Infeasible(String),

    #[error(
        "supply/demand mismatch grew for {iterations} consecutive iterations at step size {xi}; \
         reduce xi"
    )]
    StepSize { xi: f64, iterations: usize },

    #[error("grid of {points} points exceeds the enumeration cap of {cap}")]
    GridTooLarge { points: f64, cap: f64 },

    #[error("parse error at `{path}`: {message}")]
    Parse { path: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
