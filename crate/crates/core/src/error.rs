use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("duplicate message id `{0}`")]
    DuplicateMessage(String),

    #[error("unknown message `{0}`")]
    UnknownMessage(String),

    #[error("empty collection: {0}")]
    EmptyCollection(String),

    #[error("query unanswerable: no query term occurs in the collection")]
    QueryUnanswerable,

    #[error("inconsistent statistics for term `{0}`: observed but df or cf is zero")]
    InconsistentStats(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("corrupt training pair `{pair}`: {reason}")]
    CorruptPair { pair: String, reason: String },

    #[error("non-finite loss on pair `{0}`")]
    NonFiniteLoss(String),

    #[error("artifact format: {0}")]
    Format(String),

    #[error("missing artifact `{artifact}`: run {stage} first")]
    MissingArtifact { artifact: String, stage: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Bincode(#[from] bincode::Error),
}

impl Error {
    /// Validation errors map to exit code 1, everything else is a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_) | Error::MissingArtifact { .. } | Error::Format(_) | Error::Parse { .. }
        )
    }
}
