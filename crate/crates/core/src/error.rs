use thiserror::Error;

/// Errors raised anywhere in the toolkit.
///
/// Each variant maps onto one of the process exit codes used by the CLI
/// (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error in {source_name}: {detail}")]
    Parse { source_name: String, detail: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn parse(source_name: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Parse {
            source_name: source_name.into(),
            detail: detail.into(),
        }
    }

    /// 2 = configuration, 3 = data, 4 = numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Shape { .. } => 2,
            Error::Data(_) | Error::Parse { .. } | Error::Io(_) | Error::Json(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
