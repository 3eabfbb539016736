use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while decoding a `.dpw` weight container.
#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("bad magic {found:?}, expected \"DPW1\"")]
    BadMagic { found: [u8; 4] },
    #[error("file too short for header ({0} bytes)")]
    TruncatedHeader(usize),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("tensor `{tensor}`: unsupported dtype {dtype:?}")]
    UnsupportedDtype { tensor: String, dtype: String },
    #[error("tensor `{tensor}`: payload truncated (need {needed} bytes, have {available})")]
    Truncated {
        tensor: String,
        needed: usize,
        available: usize,
    },
    #[error("tensor `{tensor}`: shape mismatch (expected {expected:?}, header declares {declared:?}, {length_bytes} bytes)")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        declared: Vec<usize>,
        length_bytes: usize,
    },
    #[error("tensor `{tensor}` missing from header")]
    MissingTensor { tensor: String },
    #[error("tensor `{tensor}`: non-finite weight at index {index}")]
    NonFinite { tensor: String, index: usize },
}

/// Failures while ingesting a mutation-effect assay.
#[derive(Debug, Error, PartialEq)]
pub enum AssayError {
    #[error("missing column `{0}`")]
    MissingColumn(&'static str),
    #[error("row {row}: malformed mutation code {code:?}")]
    MalformedCode { row: usize, code: String },
    #[error("row {row}: position {position} outside wildtype of length {length}")]
    PositionOutOfRange {
        row: usize,
        position: usize,
        length: usize,
    },
    #[error("row {row}: wildtype mismatch for {code}, sequence has {actual} at that position")]
    WildtypeMismatch { row: usize, code: String, actual: char },
    #[error("row {row}: duplicate position {position} in one variant")]
    DuplicatePosition { row: usize, position: usize },
    #[error("row {row}: measurement {value:?} is not a finite number")]
    BadMeasurement { row: usize, value: String },
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("prompt length {len} exceeds max_seq_len {max}")]
    PromptTooLong { len: usize, max: usize },
    #[error("token {token} at position {position} is outside vocabulary of size {vocab}")]
    TokenOutOfRange {
        position: usize,
        token: u32,
        vocab: usize,
    },
    #[error("objective mismatch: {0}")]
    ObjectiveMismatch(String),
    #[error("intervention: {0}")]
    Intervention(String),
    #[error("no positions to evaluate")]
    EmptyEvalSet,
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("assay: {0}")]
    Assay(#[from] AssayError),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),
    #[error("report: {0}")]
    Report(String),
    #[error("prompt {prompt}, source layer {layer}: {source}")]
    InPrompt {
        prompt: usize,
        layer: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier, used for one-line machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite(_) => "non_finite",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::EmptyPrompt => "empty_prompt",
            Error::PromptTooLong { .. } => "prompt_too_long",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::ObjectiveMismatch(_) => "objective_mismatch",
            Error::Intervention(_) => "intervention",
            Error::EmptyEvalSet => "empty_eval_set",
            Error::Checkpoint(e) => match e {
                CheckpointError::BadMagic { .. } => "checkpoint_bad_magic",
                CheckpointError::TruncatedHeader(_) | CheckpointError::Truncated { .. } => {
                    "checkpoint_truncated"
                }
                CheckpointError::ShapeMismatch { .. } => "checkpoint_shape_mismatch",
                CheckpointError::NonFinite { .. } => "checkpoint_non_finite",
                _ => "checkpoint_format",
            },
            Error::Assay(_) => "assay",
            Error::Diverged { .. } => "diverged",
            Error::NonFiniteGradient(_) => "non_finite_gradient",
            Error::Report(_) => "report",
            Error::InPrompt { source, .. } => source.kind(),
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
