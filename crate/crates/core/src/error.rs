use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid offspring law: {0}")]
    InvalidLaw(String),

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("model requirement violated: {0}")]
    Model(String),

    #[error("invalid vertex address: {0}")]
    Address(String),

    #[error("rejection oracle infeasible: acceptance probability {0:.3e} below 1e-6")]
    OracleInfeasible(f64),

    #[error("malformed trajectory: {0}")]
    MalformedTrajectory(String),

    #[error("incomplete excursion at backbone index {0}")]
    IncompleteExcursion(usize),

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("range error: {0}")]
    Range(String),

    #[error("degenerate test: {0}")]
    DegenerateTest(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
