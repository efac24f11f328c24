use std::path::PathBuf;

use crate::model::Parameters;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sequence of length {len} exceeds max_len {max_len}")]
    LengthOverflow { len: usize, max_len: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("non-finite logit at batch {batch}, position {position}")]
    NonFiniteLogits { batch: usize, position: usize },

    #[error("label {label} at batch {batch}, position {position} is not admitted by the subset mask")]
    LabelNotAdmitted {
        batch: usize,
        position: usize,
        label: u32,
    },

    #[error("mixing weight {0} outside [0, 1]")]
    MixingWeight(f64),

    #[error("training diverged at epoch {epoch} (non-finite loss); last good checkpoint retained")]
    Diverged {
        epoch: usize,
        last_good: Box<Parameters>,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
