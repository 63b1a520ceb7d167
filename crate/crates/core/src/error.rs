use thiserror::Error;

pub type Result<T> = std::result::Result<T, HillError>;

#[derive(Debug, Error)]
pub enum HillError {
    #[error("composed input length {len} exceeds max context {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("enumeration would visit {required} sequences, budget is {budget}")]
    BudgetExceeded { required: u128, budget: u128 },

    #[error("gradient contains non-finite entries")]
    NonFiniteGradient,

    #[error("gradient length {got} does not match parameter count {expected}")]
    GradientShape { expected: usize, got: usize },

    #[error("group was sampled under a different input than the one being updated")]
    InputMismatch,

    #[error("correct-trajectory set is empty")]
    EmptyCorrectSet,

    #[error("valid mixed-outcome candidate has no reliance estimate")]
    MissingReliance,

    #[error("success probability is zero under the plain input")]
    ZeroSuccess,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HillError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        HillError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
