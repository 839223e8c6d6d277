use thiserror::Error;

/// Everything that can go wrong inside the engine.
#[derive(Debug, Error)]
pub enum PepsError {
    #[error("invalid lattice: {0}")]
    Lattice(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("zero amplitude: {0}")]
    ZeroAmplitude(String),
    #[error("size guard exceeded: {0}")]
    SizeGuard(String),
    #[error("did not converge: {0}")]
    NoConvergence(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PepsError>;
