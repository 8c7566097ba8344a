use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("pattern budget exceeded: {needed} candidates > budget {budget}")]
    BudgetExceeded { needed: String, budget: usize },

    #[error("first-layer arrangement set is empty")]
    EmptyFirstSet,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("variables do not match the program: {0}")]
    KeyMismatch(String),

    #[error("solver diverged at iteration {iter}: objective {objective}")]
    Divergence { iter: usize, objective: f64 },

    #[error("loss {0} has no closed-form conjugate")]
    UnsupportedLoss(&'static str),

    #[error("variables violate the cone constraints (total {total:e} > {tol:e})")]
    InfeasibleVars { total: f64, tol: f64 },

    #[error("index {k} out of range 1..={max}")]
    IndexOutOfRange { k: usize, max: usize },

    #[error("rank {r} out of range 1..={max}")]
    RankOutOfRange { r: usize, max: usize },

    #[error("linear program failed: {0}")]
    Lp(String),

    #[error("csv error at row {row}, column {col}: {msg}")]
    Csv { row: usize, col: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
