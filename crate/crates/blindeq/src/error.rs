use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes, lengths or parameters supplied by the caller.
    #[error("configuration error: {0}")]
    Config(String),

    /// A value left the domain of an operation (e.g. the log of a collapsed
    /// distortion term).
    #[error("numerical domain error: {0}")]
    Domain(String),

    /// An adaptive equalizer produced a non-finite loss.
    #[error("equalizer diverged at batch {batch}: {reason}")]
    Divergence { batch: usize, reason: String },

    #[error("failed to parse config: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
