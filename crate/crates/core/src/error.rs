use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed npy file: {0}")]
    Format(String),
    #[error("unsupported dtype {0:?}, only '<f4' is accepted")]
    UnsupportedDtype(String),
    #[error("unsupported layout: fortran_order must be False")]
    UnsupportedLayout,
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("similarity undefined: {0}")]
    UndefinedSimilarity(String),
    #[error("graph error at stage {stage}: {message}")]
    Graph { stage: usize, message: String },
    #[error("graph error: {0}")]
    Manifest(String),
    #[error("cut violation: stage {consumer} reads placeholder slot {slot}")]
    CutViolation { consumer: usize, slot: String },
    #[error("stage {stage} cannot be executed: {reason}")]
    NotExecutable { stage: usize, reason: String },
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
    #[error("estimator fit failed: {0}")]
    Fit(String),
    #[error("plan error: {0}")]
    Plan(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// Any other error, tagged with the file it was read from.
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_file(path: impl Into<PathBuf>, source: Error) -> Self {
        match source {
            e @ (Error::Io { .. } | Error::Json { .. } | Error::Csv { .. } | Error::File { .. }) => e,
            e => Error::File {
                path: path.into(),
                source: Box::new(e),
            },
        }
    }

    pub(crate) fn graph(stage: usize, message: impl Into<String>) -> Self {
        Error::Graph {
            stage,
            message: message.into(),
        }
    }

    /// The underlying error with any file tags removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::File { source, .. } => source.root(),
            e => e,
        }
    }

    /// True for failures of the filesystem rather than of the data.
    pub fn is_io(&self) -> bool {
        match self.root() {
            Error::Io { .. } => true,
            Error::Csv { source, .. } => source.is_io_error(),
            _ => false,
        }
    }
}
