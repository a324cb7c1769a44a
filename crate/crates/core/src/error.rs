use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("encoder capacity {capacity} exhausted while registering {value:?}")]
    CapacityExhausted { value: String, capacity: usize },

    #[error("category code {code} out of range for capacity {capacity}")]
    CodeOutOfRange { code: u32, capacity: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("persistent divergence during warmup: {divergences} of {steps} steps diverged")]
    PersistentDivergence { divergences: usize, steps: usize },

    #[error("malformed input at line {line}: {message}")]
    Malformed { line: u64, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid {field}: {message}")]
    InvalidSpec { field: String, message: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidSpec {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps a TOML parse error, naming the key on the offending line.
    pub(crate) fn toml(text: &str, e: toml::de::Error) -> Self {
        let field = e.span().map_or_else(
            || "<document>".to_string(),
            |span| {
                let start = text[..span.start.min(text.len())].rfind('\n').map_or(0, |i| i + 1);
                let line = text[start..].lines().next().unwrap_or("");
                let key = line.split('=').next().unwrap_or("").trim();
                if key.is_empty() { "<document>".to_string() } else { key.to_string() }
            },
        );
        Error::InvalidSpec {
            field,
            message: e.message().trim().to_string(),
        }
    }
}
