use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("parameter out of range: {0}")]
    OutOfRange(String),

    #[error("robots {i} and {j} are coincident")]
    CoincidentRobots { i: usize, j: usize },

    #[error("goals of robots {i} and {j} coincide")]
    CoincidentGoals { i: usize, j: usize },

    #[error("safety violated between robots {i} and {j}: penetration depth {depth:.3e}")]
    SafetyViolated { i: usize, j: usize, depth: f64 },

    #[error("constraint bound singular on the safety boundary between robots {i} and {j}")]
    BoundarySingularity { i: usize, j: usize },

    #[error("zero constraint normal")]
    ZeroVector,

    #[error("QP for robot {robot} infeasible at t = {t:.6}")]
    QpInfeasible { robot: usize, t: f64 },

    #[error("QP solver failed: {0}")]
    Solver(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid scenario: {0}")]
    Scenario(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    /// Short machine-readable class, used by the CLI diagnostics.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidParams(_) | Error::OutOfRange(_) => "invalid-input",
            Error::CoincidentRobots { .. } | Error::CoincidentGoals { .. } => "degenerate",
            Error::SafetyViolated { .. } => "safety-violated",
            Error::BoundarySingularity { .. } => "boundary-singularity",
            Error::ZeroVector => "degenerate",
            Error::QpInfeasible { .. } => "qp-infeasible",
            Error::Solver(_) => "solver",
            Error::Unsupported(_) => "unsupported",
            Error::Scenario(_) => "scenario",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
        }
    }
}
