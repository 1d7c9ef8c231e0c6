//! Error taxonomy shared across the toolkit.
//!
//! Exit-code contract used by the CLI: 0 success, 2 configuration error,
//! 3 runtime abort (numeric divergence), 4 I/O error.

use std::path::PathBuf;
use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Error, Debug)]
pub enum Error {
    /// Invalid configuration, bad flag value, or precondition violation the
    /// user can fix (names the offending key where possible).
    #[error("config error: {0}")]
    Config(String),

    /// A target domain carries a class label absent from the source label space.
    #[error("label space mismatch: class `{class}` in `{tree}` is not a source class")]
    LabelMismatch { class: String, tree: String },

    /// An internal shape or invariant contract was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training produced a non-finite loss; carries a diagnostics snapshot.
    #[error("numeric abort at iteration {iteration} (pass {pass}, domain {domain}): {detail}")]
    Numeric {
        iteration: usize,
        pass: usize,
        domain: i64,
        detail: String,
    },

    /// Checkpoint schema version does not match this build.
    #[error("checkpoint schema version {found} does not match expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    /// Filesystem failure with the offending path.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file contents (JSON, PNG, checkpoint payload).
    #[error("failed to decode {path}: {detail}")]
    Decode { path: PathBuf, detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::LabelMismatch { .. } | Error::CheckpointVersion { .. } => 2,
            Error::Contract(_) | Error::Numeric { .. } => 3,
            Error::Io { .. } | Error::Decode { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(
            Error::LabelMismatch {
                class: "zebra".into(),
                tree: "target_a".into()
            }
            .exit_code(),
            2
        );
        assert_eq!(
            Error::Numeric {
                iteration: 1,
                pass: 1,
                domain: 0,
                detail: "nan".into()
            }
            .exit_code(),
            3
        );
        assert_eq!(
            Error::io("/nope", std::io::Error::from(std::io::ErrorKind::NotFound)).exit_code(),
            4
        );
        assert_eq!(
            Error::CheckpointVersion {
                found: 9,
                expected: 1
            }
            .exit_code(),
            2
        );
    }
}
