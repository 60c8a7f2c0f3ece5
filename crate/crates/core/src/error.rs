use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, VmdnnError>;

#[derive(Debug, Error)]
pub enum VmdnnError {
    /// A scalar primitive received an input outside its domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Shapes, time constants or other structural settings are inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A non-finite value appeared while running the network.
    #[error("numerical divergence in layer {layer} at step {step}")]
    Divergence { layer: String, step: usize },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },

    #[error("checkpoint truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },

    #[error("checkpoint checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("missing prerequisite artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl VmdnnError {
    pub fn config(msg: impl Into<String>) -> Self {
        VmdnnError::Config(msg.into())
    }

    pub fn divergence(layer: impl Into<String>, step: usize) -> Self {
        VmdnnError::Divergence {
            layer: layer.into(),
            step,
        }
    }
}
