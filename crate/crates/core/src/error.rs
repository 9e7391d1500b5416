use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// The CLI maps these onto its exit-code contract through [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("{primitive}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        primitive: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),
    #[error("{primitive}: missing or invalid attribute `{attr}`")]
    BadAttribute {
        primitive: &'static str,
        attr: &'static str,
    },
    #[error("{primitive}: produced a non-finite value from finite inputs")]
    NonFinite { primitive: &'static str },
    #[error("backward: {0}")]
    Backward(String),
    #[error("graph: {0}")]
    Graph(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("architecture: {0}")]
    Architecture(String),
    #[error("data: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// 0 success, 1 I/O, 2 validation, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 1,
            Error::NonFinite { .. } | Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}
