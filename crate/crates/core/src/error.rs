use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while loading data, fitting, or predicting.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty dataset")]
    EmptyDataset,

    #[error("missing column(s): {}", .0.join(", "))]
    MissingColumns(Vec<String>),

    #[error("parse error at row {row}, column '{column}': cannot read '{value}' as a number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("treatment value at row {row} must be 0 or 1, found '{value}'")]
    TreatmentDomain { row: usize, value: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter '{name}': {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("{arm} arm is empty: {context}")]
    EmptyArm { arm: &'static str, context: String },

    #[error("empty model: no penalized columns survived design construction")]
    EmptyModel,

    #[error("invalid rule '{text}': {reason}")]
    RuleSyntax { text: String, reason: String },

    #[error("invalid scenario id {0} (expected 1..=16)")]
    Scenario(usize),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
