use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed JSON. `offset` is the byte offset into the input.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("mapping error: {0}")]
    Mapping(String),

    #[error(
        "injectivity error in dataset `{dataset}`: source keypoints `{first}` and `{second}` both map to `{main_name}`"
    )]
    Injectivity {
        dataset: String,
        first: String,
        second: String,
        main_name: String,
    },

    #[error("merge error: {0}")]
    Merge(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("annotation {0} has no labeled keypoints")]
    DegenerateAnnotation(u64),

    #[error("OKS undefined: ground-truth annotation {0} has no labeled keypoints")]
    UndefinedOks(u64),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("conversion table line {line}: {message}")]
    Table { line: u64, message: String },

    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the filesystem rather than by the data.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } => true,
            Error::Csv(e) => e.is_io_error(),
            _ => false,
        }
    }
}
