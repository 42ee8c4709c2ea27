use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("empty drivable area")]
    EmptyDrivableArea,

    #[error("derive_kinematics needs at least 3 positions, got {0}")]
    TooFewPositions(usize),

    #[error("invalid gaussian: {0}")]
    InvalidGaussian(String),

    #[error("k = {k} is out of range 1..={modes}")]
    KOutOfRange { k: usize, modes: usize },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("missing header")]
    MissingHeader,

    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("line {line}: {reason}")]
    Dataset { line: usize, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
