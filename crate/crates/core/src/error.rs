use std::path::PathBuf;

/// Errors produced by the library.
///
/// `Io` is kept separate from the rest so that callers (the CLI) can map it to
/// a distinct exit status.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid {what}: {message}")]
    Invalid { what: String, message: String },
    #[error("degenerate subject box (h={h}, w={w})")]
    DegenerateSubject { h: f64, w: f64 },
    #[error("frequency undefined for class {0}: no triplets")]
    FrequencyUndefined(usize),
    #[error("alpha {alpha} out of range [1, {max}]")]
    AlphaOutOfRange { alpha: usize, max: usize },
    #[error("K mismatch: {left} has K={left_k}, {right} has K={right_k}")]
    KMismatch {
        left: String,
        left_k: usize,
        right: String,
        right_k: usize,
    },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(what: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid {
            what: what.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the filesystem rather than by content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
