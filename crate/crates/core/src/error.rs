use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("label is empty after normalization")]
    EmptyLabel,
    #[error("label `{label}` already exists with kind {existing:?}")]
    KindConflict {
        label: String,
        existing: crate::graph::Kind,
    },
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("unknown root entity `{0}`")]
    UnknownRoot(String),
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("unknown id `{0}`")]
    UnknownId(String),

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported archive format version {found} (max supported {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("corrupt record in {file} at line {line}: {reason}")]
    CorruptRecord {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("parse error: {0}")]
    Parse(String),

    #[error("document `{0}` has an empty body")]
    EmptyDocument(String),
    #[error("provider unavailable after {attempts} attempt(s): {reason}")]
    ProviderUnavailable { attempts: u32, reason: String },
    #[error("provider returned a malformed response: {reason}")]
    ProviderMalformed { raw: String, reason: String },

    #[error("part template is cyclic at `{0}`")]
    CyclicTemplate(String),
    #[error("invalid part template: {0}")]
    InvalidTemplate(String),
    #[error("segmentation provider returned an empty mask")]
    EmptyMask,
    #[error("verifier answer is not a yes/no answer: `{0}`")]
    UnparseableAnswer(String),
    #[error("part label `{label}` is not in the hierarchy of `{category}`")]
    UnknownPartLabel { category: String, label: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("no triplets left after the entity-length filter")]
    EmptyAfterFilter,
    #[error("gold entity missing from candidate set of query {0}")]
    GoldMissing(usize),
    #[error("category `{category}` has {found} annotated images (need at least {needed})")]
    InsufficientImages {
        category: String,
        found: usize,
        needed: usize,
    },
    #[error("constraint violated: {0}")]
    ConstraintViolation(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("review item `{0}` was already decided")]
    AlreadyDecided(String),
    #[error("unknown review item `{0}`")]
    UnknownItem(String),
    #[error("invalid edit: {0}")]
    InvalidEdit(String),

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command line: 2 precondition, 3 provider
    /// failure, 4 data corruption, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ProviderUnavailable { .. }
            | Error::ProviderMalformed { .. }
            | Error::UnparseableAnswer(_)
            | Error::EmptyMask => 3,
            Error::CorruptRecord { .. }
            | Error::UnsupportedVersion { .. }
            | Error::DanglingReference(_)
            | Error::Parse(_) => 4,
            Error::MissingPrerequisite(_)
            | Error::InvalidConfig(_)
            | Error::UnknownRoot(_)
            | Error::UnknownCategory(_)
            | Error::InsufficientImages { .. }
            | Error::EmptyAfterFilter
            | Error::VocabMismatch(_) => 2,
            _ => 1,
        }
    }
}
