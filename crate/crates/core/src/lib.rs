//! Mean-teacher knowledge distillation with class-guided contrastive
//! distillation (CCD) and categorical relation preserving (CRP) losses.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`tensor`]), micro student/teacher networks ([`models`]), per-sample
//! embedding memory banks ([`membank`]), the losses ([`losses`],
//! [`relation`]), a deterministic training loop with checkpointing
//! ([`trainer`]), classification metrics ([`metrics`]) and the experiment
//! front end ([`cli`]).

pub mod cli;
pub mod dataio;
pub mod gradcheck;
pub mod losses;
pub mod membank;
pub mod metrics;
pub mod models;
pub mod par;
pub mod relation;
pub mod seed;
pub mod selftest;
pub mod tensor;
pub mod trainer;

use std::path::PathBuf;

pub use tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest row {row}: {message}")]
    Manifest { row: usize, message: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {components}")]
    NonFinite {
        epoch: usize,
        step: usize,
        components: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
