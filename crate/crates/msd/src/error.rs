//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands had incompatible shapes.
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    /// A vector argument had the wrong length.
    #[error("{op}: expected length {expected}, got {got}")]
    LengthMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    /// An operation produced or consumed a non-finite value.
    #[error("non-finite value in {op}: {detail}")]
    NonFinite { op: &'static str, detail: String },

    /// A configuration value failed validation. The message names the key.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Teacher-output text did not follow the record grammar.
    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: usize, detail: String },

    /// A lookup referenced an id that does not exist.
    #[error("unknown {kind} id {id}")]
    UnknownId { kind: &'static str, id: u64 },

    /// A token id fell outside the vocabulary.
    #[error("token id {id} out of range (vocab size {vocab})")]
    TokenOutOfRange { id: u32, vocab: usize },

    /// Training diverged; carries diagnostics from the failing step.
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    /// A metric was requested on input where it is undefined.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// The configured teacher backend is not usable in this build.
    #[error("teacher '{name}' unavailable: {detail}")]
    TeacherUnavailable { name: String, detail: String },

    /// A pipeline stage was invoked before its inputs exist.
    #[error("missing input for stage {stage}: {path}")]
    MissingInput { stage: String, path: String },

    /// Malformed artifact file (checkpoint, corpus file, trace, ...).
    #[error("bad artifact {path}: {detail}")]
    BadArtifact { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors a caller caused with bad arguments or config, as
    /// opposed to runtime failures. The CLI maps these to exit code 1.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::ShapeMismatch { .. }
                | Error::LengthMismatch { .. }
                | Error::MissingInput { .. }
        )
    }
}
