use thiserror::Error;

use crate::slm::SlmFit;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input that is not tied to a single cell.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("row {row}, column `{column}`: {message}")]
    Cell {
        row: usize,
        column: String,
        message: String,
    },

    #[error("covariate `{covariate}`: value {value} is outside the Box-Cox domain (x + lambda2 = {shifted} <= 0)")]
    Domain {
        covariate: String,
        value: f64,
        shifted: f64,
    },

    #[error("x = {value} is outside the Box-Cox domain (x + lambda2 = {shifted} <= 0)")]
    BoxCoxDomain { value: f64, shifted: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    /// The optimizer exhausted its restarts without meeting the tolerance.
    /// The fit at the best parameters found is carried along.
    #[error("covariance optimizer did not converge after {restarts} restart(s); best negative log-likelihood {best_value}")]
    NonConvergence {
        restarts: usize,
        best_value: f64,
        best: Box<SlmFit>,
    },

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn singular(msg: impl Into<String>) -> Self {
        Error::Singular(msg.into())
    }
}
