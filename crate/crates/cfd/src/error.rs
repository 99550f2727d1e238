//! Crate-wide error type with stable process exit codes per category.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("autodiff error: {0}")]
    Autodiff(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, step {step}: {what}")]
    Diverged {
        epoch: usize,
        step: usize,
        what: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI, one code per error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) => 2,
            Error::Autodiff(_) => 3,
            Error::Config(_) => 4,
            Error::Data(_) => 5,
            Error::Checkpoint(_) => 6,
            Error::Diverged { .. } => 7,
            Error::Io(_) => 8,
        }
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
