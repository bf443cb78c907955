use thiserror::Error;

/// Errors surfaced by the numerical pipeline.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("mesh error: {0}")]
    Mesh(String),

    #[error("solver diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("fixed-point iteration failed after {iters} iterations (residual {residual:.3e})")]
    FixedPoint { iters: usize, residual: f64 },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("ensemble error: {0}")]
    Ensemble(String),

    #[error("sampler error: {0}")]
    Sampler(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("forward model failed for system {system}: {source}")]
    Forward {
        system: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Tag an error with the index of the system whose forward solve produced it.
    pub fn for_system(self, system: usize) -> Error {
        Error::Forward {
            system,
            source: Box::new(self),
        }
    }
}
