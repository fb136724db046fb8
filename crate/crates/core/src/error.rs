use thiserror::Error;

/// Errors produced by the sampler, the quadrature harness and the theory layer.
#[derive(Debug, Error)]
pub enum Error {
    /// A point lies on the boundary of, or outside, the constraint set.
    #[error("point outside the open domain: {0}")]
    Domain(String),

    /// A computation produced a non-finite or degenerate value.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A particle-level failure during a step; carries the step and particle index.
    #[error("step {step}, particle {particle}: {source}")]
    Particle {
        step: usize,
        particle: usize,
        #[source]
        source: Box<Error>,
    },

    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A modelling assumption needed by a bound does not hold or cannot be certified.
    #[error("assumption violated: {0}")]
    Assumption(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by the numerics rather than by the user's input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Domain(_) | Error::Particle { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
