use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A quadrature node, recursion step or matrix entry produced NaN or infinity.
    #[error("non-finite value in {context} at {at}")]
    NonFinite { context: &'static str, at: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parameterization error: {0}")]
    Parameterization(String),

    #[error("training diverged at step {step} (loss {loss:e})")]
    Divergence { step: usize, loss: f64 },

    #[error("eigensolver failed: {0}")]
    Eigensolver(String),
}

impl Error {
    /// Short machine-readable tag, stable across releases.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonFinite { .. } => "numerical",
            Error::Domain(_) => "domain",
            Error::Shape(_) => "shape",
            Error::Parameterization(_) => "parameterization",
            Error::Divergence { .. } => "divergence",
            Error::Eigensolver(_) => "eigensolver",
        }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
