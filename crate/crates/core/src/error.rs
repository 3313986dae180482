use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown state `{0}`")]
    UnknownState(String),

    #[error("unknown action `{0}`")]
    UnknownAction(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("cosine undefined: the semi-gradient force vanishes at ({0}, {1})")]
    UndefinedCosine(f64, f64),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite force {value:?} at cell ({i}, {j})")]
    NonFiniteForce { i: usize, j: usize, value: [f64; 2] },

    #[error(
        "edge rate exponent {exponent:.1} exceeds 700 between cells {from} and {to}; use a smaller resolution or a larger sigma"
    )]
    RateOverflow { exponent: f64, from: usize, to: usize },

    #[error("steady state not converged: residual {residual:e} exceeds tolerance {tolerance:e}")]
    NotConverged { residual: f64, tolerance: f64 },

    #[error("training diverged at step {step}: loss {loss:e} exceeds 1e12")]
    Diverged { step: usize, loss: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }
}
