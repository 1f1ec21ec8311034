use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),
    #[error("enumeration cap exceeded: N = {n} > {cap}")]
    EnumerationCap { n: usize, cap: usize },
    #[error("CFL condition violated: tau*L/h = {ratio:.4} > 1")]
    Cfl { ratio: f64 },
    #[error("kernel is not positive semidefinite (smallest eigenvalue {0:.3e})")]
    NotPsd(f64),
    #[error("expected a probability measure, got total mass {0}")]
    NotProbability(f64),
    #[error("instance carries no perturbation data")]
    NoPerturbation,
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("unknown strategy `{name}` (available: {available})")]
    UnknownStrategy { name: String, available: String },
}

pub type Result<T> = std::result::Result<T, Error>;
