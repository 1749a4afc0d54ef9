use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid WAV data: {0}")]
    Wav(String),

    #[error("unsupported WAV encoding: format tag {format_tag:#06x}, {bits} bits per sample")]
    UnsupportedCodec { format_tag: u16, bits: u16 },

    #[error("audio contains no samples")]
    EmptyAudio,

    #[error("audio is all zeros; cannot normalize")]
    AllZero,

    #[error("audio is entirely silent under the trimming rule")]
    EntirelySilent,

    #[error("signal of {len} samples is shorter than one {frame}-sample frame")]
    TooShort { len: usize, frame: usize },

    #[error("{path}: {source}")]
    InFile {
        path: String,
        #[source]
        source: Box<Error>,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("feature cache: {0}")]
    Cache(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Autograd(#[from] omoq_autograd::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn in_file(self, path: impl std::fmt::Display) -> Self {
        match self {
            // I/O errors already carry their path
            e @ Error::Io { .. } | e @ Error::InFile { .. } => e,
            e => Error::InFile {
                path: path.to_string(),
                source: Box::new(e),
            },
        }
    }
}

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
