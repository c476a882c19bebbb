use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema violation at line {line}: {reason}")]
    SchemaViolation { line: usize, reason: String },

    #[error("duplicate problem id `{0}`")]
    DuplicateProblemId(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("could not parse candidate output: {0}")]
    ParseFailure(String),

    #[error("invalid puzzle: {0}")]
    InvalidPuzzle(String),

    #[error("puzzle has no consistent assignment")]
    NoSolution,

    #[error("puzzle has {0} consistent assignments")]
    MultipleSolutions(usize),

    #[error("no candidate in pool `{0}` is flagged as greedy")]
    MissingGreedyFlag(String),

    #[error("pool `{0}` lacks the labels needed for this operation")]
    MissingLabels(String),

    #[error("constraint report has no violated dimension")]
    EmptyReport,

    #[error("itinerary checking requires a sandbox database")]
    MissingSandbox,

    #[error("generation backend failed: {0}")]
    Backend(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("internal invariant failed: {0}")]
    Internal(String),
}

impl Error {
    /// Process exit status: 2 for bad inputs, 3 for data the method cannot
    /// use, 4 for a broken internal invariant.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DegenerateData(_) | Error::NoSolution | Error::MultipleSolutions(_) | Error::EmptyReport => 3,
            Error::Internal(_) => 4,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(line: usize, reason: impl Into<String>) -> Self {
        Error::SchemaViolation {
            line,
            reason: reason.into(),
        }
    }
}
