use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("feature vector at position {position} has norm {norm:e} (dead encoder position)")]
    ZeroFeatureVector { position: usize, norm: f64 },

    #[error("kernel {index} has norm {norm:e} and cannot be projected to the sphere")]
    ZeroKernel { index: usize, norm: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("all-zero activation vector at position {position}")]
    DegenerateActivation { position: usize },

    #[error("shape mismatch in {what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("pseudo label still carries gradient; detach it first")]
    MissingStopGradient,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("setting mismatch: {0}")]
    SettingMismatch(String),

    #[error("non-finite loss at iteration {iteration} (batch samples {batch}): {terms}")]
    NonFiniteLoss {
        iteration: usize,
        batch: String,
        terms: String,
    },

    #[error("label fraction {0} outside (0, 1]")]
    InvalidFraction(f64),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("missing field: {0}")]
    MissingField(String),

    #[error("no activation channel matched to factor {0}")]
    NoMatchedChannel(String),

    #[error("factor leaves the image after a shift of {shift:?}")]
    FactorOutOfBounds { shift: (i64, i64) },

    #[error("no samples or factors to match channels against")]
    EmptyFactorSet,

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("sample not found: {0}")]
    MissingSample(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn shape(what: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            what,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
