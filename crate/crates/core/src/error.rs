// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the probing pipeline.
#[derive(Debug, Error)]
pub enum ProbeError {
    /// A file could not be read or parsed.
    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    /// A tensor did not have the shape implied by the model config.
    #[error("tensor `{tensor}` has shape {actual:?}, expected {expected:?}")]
    Shape {
        tensor: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    /// Structurally valid input that violates an operation's contract.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// NaN or infinity appeared during a forward pass.
    #[error("non-finite activation in {site} of layer {layer}")]
    NonFinite { layer: usize, site: &'static str },

    /// Zero-norm vector where a direction is needed.
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    /// A regression design without enough independent information.
    #[error("degenerate regressor: {0}")]
    DegenerateRegressor(String),

    /// A test statistic with zero variance in its denominator.
    #[error("degenerate test: {0}")]
    DegenerateTest(String),

    /// A stimulus word could not be located in its sentence.
    #[error("cannot align `{word}` in \"{sentence}\"")]
    Alignment { word: String, sentence: String },

    /// Stimulus file columns could not be resolved.
    #[error("schema error: {0}")]
    Schema(String),

    /// Run configuration was rejected.
    #[error("config error: {0}")]
    Config(String),

    /// Hub revision or file does not exist.
    #[error("not found: {what}{}", nearby_hint(.nearby))]
    NotFound { what: String, nearby: Vec<String> },

    /// Downloaded content did not match the advertised digest.
    #[error("integrity check failed for {path}: expected {expected}, got {actual}")]
    Integrity {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("network error: {0}")]
    Network(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn nearby_hint(nearby: &[String]) -> String {
    if nearby.is_empty() {
        String::new()
    } else {
        format!(" (nearby: {})", nearby.join(", "))
    }
}

impl ProbeError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Load {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, ProbeError>;
