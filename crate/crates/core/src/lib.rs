//! Additive-attack generation and rationale-model training for
//! reading-comprehension classification at desk scale.
//!
//! The pipeline: generate a synthetic corpus ([`synth`]), perturb it with
//! additive attack sentences derived from each query ([`addsent`] backed by
//! [`lexres`]), train an extract-then-predict rationale model ([`model`],
//! [`train`]) under several supervision regimes, and compare robustness
//! ([`eval`]).

pub mod addsent;
pub mod corpus;
pub mod eval;
pub mod lexres;
pub mod model;
pub mod rng;
pub mod synth;
pub mod train;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("validation failed for instance {id}: {message}")]
    Validation { id: String, message: String },

    #[error("resource load error in {path} line {line}: {message}")]
    Resource {
        path: String,
        line: usize,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("training diverged: {0}")]
    Diverged(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(id: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            id: id.into(),
            message: message.into(),
        }
    }
}
