use thiserror::Error;

#[derive(Debug, Error)]
pub enum CclError {
    #[error("invalid interval: start={start} end={end} (need 0 <= start <= end <= 1)")]
    InvalidInterval { start: f64, end: f64 },

    #[error("interval set length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty metric input: {0}")]
    EmptyMetric(&'static str),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("cannot place events: {0}")]
    CannotPlaceEvents(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("shape mismatch for parameter `{name}`: {expected:?} vs {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("non-finite value in `{0}`")]
    NonFinite(String),

    #[error("zero-norm row {0} in cosine similarity")]
    ZeroNorm(usize),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: usize, msg: String },

    #[error("unknown sample id `{0}`")]
    UnknownSample(String),

    #[error("empty effective training set")]
    EmptyTrainingSet,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CclError>;
