//! Error type shared by every solver module.

use crate::coupling::PicardReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed or inconsistent model configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller violated an operation's preconditions.
    #[error("usage error: {0}")]
    Usage(String),

    /// Model parameters outside their admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Operation not defined for the given driver or coefficient family.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// The driver's second derivative in the control was non-negative at an iterate.
    #[error("concavity audit failed at a = {a}: d2F/da2 = {second_derivative}")]
    Concavity { a: f64, second_derivative: f64 },

    #[error("divergence at time node {node}: non-finite value")]
    Divergence { node: usize },

    #[error("regression basis ill-conditioned at node {node} (condition number {condition:.3e}); use fewer basis terms (lower degree) or more particles")]
    Basis { node: usize, condition: f64 },

    #[error("Picard map is not contracting (ratios >= 1 for 3 consecutive iterations); shorten the horizon or reduce damping")]
    NonContraction { report: Box<PicardReport> },

    #[error("Picard iteration did not converge within {} iterations", report.iterations)]
    NoConvergence { report: Box<PicardReport> },

    #[error("grid error: {0}")]
    Grid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical scheme itself, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Concavity { .. }
                | Error::Divergence { .. }
                | Error::Basis { .. }
                | Error::NonContraction { .. }
                | Error::NoConvergence { .. }
        )
    }
}
