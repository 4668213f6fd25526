use thiserror::Error;

/// Errors surfaced by the toolkit.
#[derive(Error, Debug)]
pub enum Error {
    /// Shape mismatch in a tensor primitive. Names the primitive and the offending dims.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A forward op or loss term produced NaN/Inf.
    #[error("numeric fault in {context}: non-finite value")]
    Numeric { context: String },

    /// Invalid configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed on-disk artifact (feature file, checkpoint).
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },

    /// Missing input file or directory.
    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn numeric(context: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
        }
    }

    pub fn format(offset: usize, detail: impl Into<String>) -> Self {
        Error::Format {
            offset,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
