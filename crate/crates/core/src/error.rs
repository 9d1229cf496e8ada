use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("degenerate vector in {op}: norm {norm:e} is below {epsilon:e}")]
    DegenerateVector {
        op: &'static str,
        norm: f64,
        epsilon: f64,
    },

    #[error("degenerate input in {op}: {detail}")]
    DegenerateInput { op: &'static str, detail: String },

    #[error("index {index} out of range for extent {extent} in {op}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("batch too small: {op} needs at least {required} rows, got {actual}")]
    BatchTooSmall {
        op: &'static str,
        required: usize,
        actual: usize,
    },

    #[error("operation {op} requires a {expected} model, got {actual}")]
    ModelKind {
        op: &'static str,
        expected: &'static str,
        actual: &'static str,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    /// Process exit code: 2 for configuration problems, 3 for runtime or
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Configuration(_) | Error::ModelKind { .. } | Error::Parameter(_) => 2,
            _ => 3,
        }
    }
}
