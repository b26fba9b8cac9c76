//! Coarse-to-fine NER training.
//!
//! A single fine-grained token classifier is trained jointly on a low-resource
//! fine-grained corpus and abundant coarse-grained corpora. Coarse supervision
//! reaches the fine-grained label space through a row-stochastic fine-to-coarse
//! (F2C) mapping matrix, and coarse tokens whose gold labels disagree with the
//! frozen fine model's mapped predictions are masked out of the loss
//! (inconsistency filtering).
//!
//! The pipeline has four stages:
//! 1. train the fine model on the fine corpus;
//! 2. build the F2C matrix per coarse corpus (train a coarse tagger, reannotate
//!    the fine corpus, count type co-occurrences, keep the top-k per row,
//!    row-normalize);
//! 3. build per-token consistency masks over each coarse corpus;
//! 4. joint training, alternating one pass over each coarse corpus and one pass
//!    over the fine corpus per epoch.
//!
//! Evaluation is span-level micro F1. Everything is deterministic given a seed.

pub mod corpus;
pub mod eval;
pub mod f2c;
pub mod filtering;
pub mod model;
pub mod rng;
pub mod trainer;

use thiserror::Error;

/// Errors across corpus I/O, model math, and training orchestration.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
