use nalgebra::DVector;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("simulation failed at step {step}: {source}")]
    Rollout {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    /// The descent produced a non-finite cost. Carries the last iterate whose
    /// cost was finite.
    #[error("optimization diverged after {iterations} iterations (last finite cost {last_cost})")]
    Diverged {
        iterations: usize,
        last_cost: f64,
        last_finite: Vec<DVector<f64>>,
    },

    #[error("identification failed at step {k}: {reason}")]
    Identification { k: usize, reason: String },

    #[error("hankel window out of range: {0}")]
    Window(String),

    #[error("feedback design failed at step {k}: {reason}")]
    Design { k: usize, reason: String },

    #[error("kalman filter failed at step {k}: {reason}")]
    Filter { k: usize, reason: String },

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}
