use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the domain of the operation (bad index, shape
    /// mismatch, out-of-range digit, ...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dense expansion needs {required} entries, cap is {cap}")]
    Size { required: usize, cap: usize },

    /// The squared-tensor distribution has no usable mass.
    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    #[error("multi-index {index:?} has zero probability")]
    ZeroProbability { index: Vec<usize> },

    #[error("non-finite gradient in core {core}")]
    NonFiniteGradient { core: usize },

    #[error("coincident particles {0} and {1}")]
    Singularity(usize, usize),

    #[error("degenerate geometry: {0}")]
    Geometry(String),

    /// A black-box energy evaluation failed.
    #[error("evaluator error: {0}")]
    Evaluator(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("no feasible candidate approved in {0} consecutive iterations; loosen d_min or use a different initialization")]
    Stagnation(usize),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Attaches a human readable context to an error.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, with all context layers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}
