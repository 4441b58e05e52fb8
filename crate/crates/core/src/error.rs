use thiserror::Error;

/// Errors surfaced by the core library.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("scale parameter must be positive: {name} = {value}")]
    NonPositiveScale { name: &'static str, value: f64 },
    #[error("improper prior not allowed here: {0}")]
    ImproperPrior(String),
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("unknown case id: {0}")]
    UnknownCase(String),
    #[error("rejection sampler exceeded {attempts} attempts")]
    RejectionCap { attempts: u64 },
    #[error("no replicated units: contrast fit needs at least one unit with K_i >= 2")]
    NoReplicatedUnits,
    #[error("singular Gram matrix (smallest eigenvalue {min_eigenvalue:.3e})")]
    SingularGram { min_eigenvalue: f64 },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("empty grid")]
    EmptyGrid,
    #[error("empty improved set with scarce mode requested")]
    EmptyImprovedSet,
    #[error("objective is not finite: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
