use thiserror::Error;

use crate::stabilizer::BudgetExceeded;

pub type Result<T, E = ArwError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ArwError {
    /// An argument lies outside the domain the operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// More particles than sites on a closed topology; no stable state exists.
    #[error("infeasible: {particles} particles cannot settle on {sites} sites")]
    Infeasible { particles: u64, sites: u64 },

    #[error(transparent)]
    BudgetExceeded(#[from] Box<BudgetExceeded>),

    #[error("degenerate density {0}: correlations need 0 < zeta < 1")]
    DegenerateDensity(f64),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("test function `{name}` is not superharmonic: discrete laplacian {laplacian:.3e} at {at:?}")]
    NotSuperharmonic {
        name: String,
        laplacian: f64,
        at: Vec<f64>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ArwError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        ArwError::Domain(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        ArwError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
