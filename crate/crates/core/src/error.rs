use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("singular unpenalized system ({0}); use a strictly positive lambda")]
    Singular(String),

    #[error("{0}")]
    Numerical(String),

    #[error("complement of exclusion key {key} has {rows} rows, need at least {required}")]
    UndersizedComplement {
        key: String,
        rows: usize,
        required: usize,
    },

    #[error("stage `{stage}` failed at key {key}: {source}")]
    Stage {
        stage: &'static str,
        key: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_stage(self, stage: &'static str, key: impl std::fmt::Display) -> Error {
        Error::Stage {
            stage,
            key: key.to_string(),
            source: Box::new(self),
        }
    }

    /// The innermost error once stage wrappers are peeled off.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code: 2 configuration, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_) | Error::UndersizedComplement { .. } => 2,
            Error::InvalidData(_) | Error::DimensionMismatch { .. } | Error::Io(_) | Error::Csv(_) => 3,
            Error::Singular(_) | Error::Numerical(_) | Error::Json(_) | Error::Stage { .. } => 4,
        }
    }
}
