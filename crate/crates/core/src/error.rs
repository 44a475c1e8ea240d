//! Error type shared across the simulator.

use thiserror::Error;

/// Errors surfaced by the simulator library.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or batch had dimensions incompatible with the operation.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    /// A non-finite value reached an operation that requires finite inputs.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Training diverged (non-finite loss or parameters) during a round.
    #[error("numeric divergence at round {round}")]
    NumericDivergence { round: usize },

    /// A class label was outside the valid range `0..num_classes`.
    #[error("label {label} outside valid range 0..{num_classes}{}", at.as_ref().map(|s| format!(" ({s})")).unwrap_or_default())]
    InvalidLabel {
        label: i64,
        num_classes: usize,
        at: Option<String>,
    },

    /// The anchor set is missing at least one class entirely.
    #[error("anchor set has no sample of class {class}; every class needs at least one anchor")]
    MissingAnchorClass { class: usize },

    /// A configuration value violated a constraint.
    #[error("{field}: {value} violates constraint {constraint}")]
    InvalidConfig {
        field: String,
        value: String,
        constraint: String,
    },

    /// Configuration file could not be parsed (syntax, unknown key, bad type).
    #[error("config parse error: {0}")]
    ConfigParse(String),

    /// A malformed row in a CSV dataset file.
    #[error("csv row {row}: {message}")]
    CsvRow { row: usize, message: String },

    /// No checkpoint exists for the requested round.
    #[error("no checkpoint found for round {round} in {dir}")]
    MissingCheckpoint { round: usize, dir: String },

    /// A checkpoint file was unreadable or inconsistent with the config.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors a user can fix by editing the config file.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig { .. } | Error::ConfigParse(_) | Error::InvalidLabel { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
