//! Error type shared by every pipeline stage.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates an operation's preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An operation was called before its prerequisites (e.g. training) ran.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A file exists but its contents don't match the expected format/version.
    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// Wraps any error with the pipeline stage it occurred in, so the CLI can
    /// map failures to per-stage exit codes.
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn invalid_state(msg: impl Into<String>) -> Self {
        Error::InvalidState(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Attach a stage label (idempotent: an already-labeled error keeps its
    /// innermost label).
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Wrap in a new outer stage label even if inner labels exist. The
    /// pipeline driver uses this so the outermost label names the top-level
    /// stage (the exit-code unit) while inner labels keep the detail.
    pub fn wrap_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn stage_name(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

/// Shorthand constructors, importable as free functions.
pub fn invalid_input(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub fn invalid_state(msg: impl Into<String>) -> Error {
    Error::InvalidState(msg.into())
}

pub fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub type Result<T> = std::result::Result<T, Error>;
