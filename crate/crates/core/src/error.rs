use std::path::PathBuf;

use crate::encoder::ModelParams;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty catalog")]
    EmptyCatalog,

    #[error("duplicate item id `{0}`")]
    DuplicateItem(String),

    #[error("invalid item: {0}")]
    InvalidItem(String),

    #[error("self pair `{0}`")]
    SelfPair(String),

    #[error("unknown item id `{0}`")]
    UnknownItem(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("cold item `{0}` already has {1} neighbor(s)")]
    ColdItemNotIsolated(String, usize),

    #[error("no attachment targets")]
    NoAttachmentTargets,

    #[error("graph has {0} edge(s); at least 2 are required to split")]
    TooFewEdges(usize),

    #[error("no negative pairs exist")]
    NoNegativePairs,

    #[error("requested {requested} negatives but only {available} non-edges exist")]
    NotEnoughNegatives { requested: usize, available: usize },

    #[error("shape mismatch in {context}: {left} vs {right}")]
    ShapeMismatch {
        context: &'static str,
        left: String,
        right: String,
    },

    #[error("no neighbors")]
    NoNeighbors,

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid value for {name}: {reason}")]
    InvalidValue { name: &'static str, reason: String },

    #[error("non-finite loss {loss} (batch seed {batch_seed})")]
    NonFiniteLoss { batch_seed: u64, loss: f64 },

    #[error("training diverged at epoch {epoch}; last good parameters retained")]
    Diverged {
        epoch: usize,
        last_good: Box<ModelParams>,
        history: Vec<f64>,
    },

    #[error("missing relevance label for ({anchor}, {candidate})")]
    MissingLabel { anchor: String, candidate: String },

    #[error("item `{0}` has no price")]
    MissingPrice(String),

    #[error("unknown model kind `{0}`")]
    UnknownModelKind(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated parameter block")]
    TruncatedParameters,

    #[error("checksum mismatch")]
    ChecksumMismatch,

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("row count mismatch: embedding file has {embedding_rows} rows, catalog has {catalog_rows}")]
    RowCountMismatch {
        embedding_rows: usize,
        catalog_rows: usize,
    },

    #[error("unsupported version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidValue {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// Errors caused by bad input data or arguments rather than a failure
    /// while computing.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::NonFiniteLoss { .. } | Error::Diverged { .. } | Error::Io { .. }
        )
    }
}
