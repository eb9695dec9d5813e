use std::io;

/// Errors raised across the lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("degenerate embedding at row {row}: pre-normalization norm {norm:e}")]
    DegenerateEmbedding { row: usize, norm: f64 },

    #[error("degenerate embedding for sample {id}: pre-normalization norm {norm:e}")]
    DegenerateSample { id: u64, norm: f64 },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("retrieval index is empty")]
    EmptyIndex,

    #[error("query has no relevant items in the index")]
    NoRelevantItems,

    #[error("no query has a relevant item in the index")]
    NoValidQueries,

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("class {0} has no training samples")]
    EmptyClass(u64),

    #[error("duplicate id {0}")]
    DuplicateId(u64),

    #[error("training diverged at step {step}: {what}")]
    Divergence { step: usize, what: String },

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("target cache digest {actual:016x} does not match parameters digest {expected:016x}")]
    CacheMismatch { expected: u64, actual: u64 },

    #[error("interpolation coefficient {0} outside [0, 1]")]
    AlphaOutOfRange(f64),

    #[error("report requires a pretrained reference")]
    MissingReference,

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the CLI: 2 for configuration problems,
    /// 3 for numerical divergence, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigInvalid(_) | Error::AlphaOutOfRange(_) | Error::Json(_) => 2,
            Error::Divergence { .. }
            | Error::NonFiniteGradient
            | Error::DegenerateEmbedding { .. }
            | Error::DegenerateSample { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
