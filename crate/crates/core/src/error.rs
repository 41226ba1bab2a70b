use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input at ({row}, {col}): {value}")]
    NonFinite { row: usize, col: usize, value: f64 },

    #[error("quantization scale must be positive and finite, got {0}")]
    InvalidScale(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("inner dimension {0} exceeds the supported maximum of {max}", max = crate::tensor::MAX_INNER_DIM)]
    InnerDimTooLarge(usize),

    #[error("index ({row}, {col}) out of bounds for {rows}x{cols} tensor")]
    OutOfBounds {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("bit position {0} outside [0, 31]")]
    InvalidBit(u8),

    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),

    #[error("rollback requires a checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("unknown block `{0}`")]
    UnknownBlock(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{}", format_config_errors(.0))]
    Config(Vec<ConfigError>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// One invalid configuration field, located by its dotted key path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub path: String,
    pub reason: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.reason)
    }
}

fn format_config_errors(errors: &[ConfigError]) -> String {
    let mut out = format!("{} invalid configuration field(s)", errors.len());
    for e in errors {
        out.push_str("\n  ");
        out.push_str(&e.to_string());
    }
    out
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
