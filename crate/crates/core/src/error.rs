use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("attention row {row} has no attendable key")]
    NoAttendableKey { row: usize },

    #[error("unknown action `{0}` in grammar")]
    UnknownAction(String),

    #[error("grammar produced an all-zero timeline after {attempts} attempts")]
    DegenerateGrammar { attempts: usize },

    #[error("memory bank is empty")]
    EmptyBank,

    #[error("average precision is undefined without positive targets")]
    NoPositives,

    #[error("requested horizon {requested} exceeds the model's anticipation horizon {available}")]
    HorizonTooLarge { requested: usize, available: usize },

    #[error("non-finite {head} at step {step} (batch videos {videos:?})")]
    NonFiniteLoss {
        step: usize,
        head: &'static str,
        videos: Vec<usize>,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("ablation cell `{cell}` seed {seed}: {source}")]
    Cell {
        cell: String,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Debug,
        actual: impl std::fmt::Debug,
    ) -> Self {
        Error::Shape {
            context,
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
