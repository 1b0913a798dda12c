use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("{file}: missing required column `{column}`")]
    MissingColumn { file: String, column: String },

    #[error("{file}:{line}: {msg}")]
    Row { file: String, line: u64, msg: String },

    #[error("invalid code `{0}`")]
    InvalidCode(String),

    #[error("invalid phenotype mapping: {0}")]
    Mapping(String),

    #[error("need at least {need} records, got {got}")]
    TooFewRecords { need: usize, got: usize },

    #[error("invalid ground-truth spec: {0}")]
    GroundTruth(String),

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("unknown token id {0}")]
    UnknownTokenId(u32),

    #[error("record header needs {need} positions but max_len is {max_len}")]
    HeaderTooLong { need: usize, max_len: usize },

    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),

    #[error("codes do not match the descriptor syntax: {0:?}")]
    DescriptorSyntax(Vec<String>),

    #[error("invalid descriptor: {0}")]
    Descriptor(String),

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("embedding file: {0}")]
    EmbeddingFormat(String),

    #[error("duplicate token `{0}`")]
    DuplicateToken(String),

    #[error("{what} hash mismatch: expected {expected}, found {found}")]
    HashMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("index spaces differ: {0} vs {1}")]
    IndexMismatch(usize, usize),

    #[error(transparent)]
    Nn(#[from] hisgt_nn::NnError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
