use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector has (near-)zero norm and cannot be normalized")]
    ZeroVector,

    #[error("embeddings do not share a schema")]
    SchemaMismatch,

    #[error("unknown axis `{axis}` (valid axes: {})", valid.join(", "))]
    UnknownAxis { axis: String, valid: Vec<String> },

    #[error("dimension mismatch{}: expected {expected}, got {got}", context_suffix(.context))]
    DimMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("projection head for axis `{axis}` produced a zero vector for item `{item}`")]
    DegenerateHead { axis: String, item: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("batch too small for a contrastive objective (size {0})")]
    BatchTooSmall(usize),

    #[error("no anchor in the batch has a positive partner")]
    NoPositives,

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("missing supervision: {0}")]
    MissingSupervision(String),

    #[error("duplicate item id `{0}`")]
    DuplicateId(String),

    #[error("unknown item id `{0}`")]
    UnknownId(String),

    #[error("item `{0}` is excluded from the ranking")]
    ExcludedTarget(String),

    #[error("index is empty")]
    EmptyIndex,

    #[error("item `{id}` lacks required label `{label}`")]
    MissingLabel { id: String, label: String },

    #[error("{}: bad magic {found:?}, expected {expected:?}", .path.display())]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("{}: unsupported format version {version}", .path.display())]
    UnsupportedVersion { path: PathBuf, version: u16 },

    #[error("{}: truncated or oversized file (expected {expected} bytes, found {found})", .path.display())]
    TruncatedFile {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("{}: blob not found", .0.display())]
    MissingBlob(PathBuf),

    #[error("entry `{id}` references row {row} of {}, which has {rows} rows", .blob.display())]
    RefOutOfRange {
        id: String,
        blob: PathBuf,
        row: usize,
        rows: usize,
    },

    #[error("per-axis norm violation for item(s): {}", .0.join(", "))]
    NormViolation(Vec<String>),

    #[error("{}:{line}: {message}", .path.display())]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn context_suffix(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" in {context}")
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(context: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::DimMismatch {
            context: context.into(),
            expected,
            got,
        }
    }
}
