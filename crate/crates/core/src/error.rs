// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

/// Errors raised by the moment-propagation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Cholesky breakdown; `index` is the first pivot that was not positive.
    #[error("matrix is not positive definite: pivot {index} = {value:e}")]
    Factorization { index: usize, value: f64 },

    #[error("non-finite state after step {step}")]
    Divergence { step: usize },

    #[error("path {path} produced a non-finite state at step {step}")]
    PathDivergence { path: usize, step: usize },

    #[error("covariance is no longer positive semi-definite at t = {t} (min eigenvalue {min_eigenvalue:e})")]
    Stability { t: f64, min_eigenvalue: f64 },

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("trajectory count cap {cap} reached without meeting the KL target (best mean KL {best_kl})")]
    TrajectoryCap { cap: usize, best_kl: f64 },

    #[error("probability mass outside the grid is {outside:e} (> 1e-4); enlarge the grid")]
    MassOutsideGrid { outside: f64 },

    #[error("density leaked through the grid boundary: remaining mass {mass}")]
    Leakage { mass: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
