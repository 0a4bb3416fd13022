use std::path::PathBuf;

/// Errors produced anywhere in the emulation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error at row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("formula error: {0}")]
    Formula(String),

    #[error("singular design: collinear columns [{}]", .columns.join(", "))]
    SingularDesign { columns: Vec<String> },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("stratum `{0}` has no fitting rows")]
    EmptyStratum(String),

    #[error("no data: {0}")]
    EmptyData(String),

    #[error("degenerate fit: {0}")]
    Degenerate(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

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

    /// True for failures of the numerical machinery rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::SingularDesign { .. } | Error::Singular(_) | Error::Degenerate(_) => true,
            Error::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        match self {
            Error::Stage { .. } => self,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
