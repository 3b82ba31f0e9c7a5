use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{what}, line {line}: {message}")]
    Parse {
        what: String,
        line: usize,
        message: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("keyword {keyword:?} (occurrence {occurrence}) not found in {sentence:?}")]
    KeywordNotFound {
        keyword: String,
        occurrence: usize,
        sentence: String,
    },

    #[error("sequence of {len} pieces exceeds the {max} supported positions")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token id {id} outside vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("missing tensor {0}")]
    MissingTensor(String),

    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("tensor {name}: unsupported dtype {dtype}")]
    TensorDtype { name: String, dtype: String },

    #[error("tensor {0} contains non-finite values")]
    NonFinite(String),

    #[error("checksum mismatch for {file}: manifest has {expected}, file hashes to {found}")]
    Checksum {
        file: String,
        expected: String,
        found: String,
    },

    #[error("weight container: {0}")]
    Container(String),

    #[error("cosine similarity undefined for a zero vector")]
    UndefinedSimilarity,

    #[error("{0}")]
    DimensionUndefined(String),

    #[error("capture policy mismatch: {0}")]
    PolicyMismatch(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("insufficient data: need at least {needed} samples, got {found}")]
    InsufficientData { needed: usize, found: usize },

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("no rows joined between {left} and {right}")]
    EmptyJoin { left: String, right: String },

    #[error("incomplete coverage: {}", .0.join(", "))]
    Coverage(Vec<String>),

    #[error("provenance conflict: {0}")]
    Provenance(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 3 for coverage failures, 1 for I/O,
    /// 2 for everything that is a validation problem with the inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Coverage(_) => 3,
            Error::Io { .. } => 1,
            _ => 2,
        }
    }
}
