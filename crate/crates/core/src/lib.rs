//! Streaming Bayesian lifelong clustering engine.
//!
//! Jointly learns a low-dimensional latent representation (MLP encoder and
//! decoder trained with hand-derived backpropagation) and a Dirichlet-process
//! Gaussian mixture over that latent space. Clusters are discovered on the
//! fly through birth moves and pruned through evidence-gated merges, while
//! hierarchical sufficient statistics and generative replay preserve what was
//! learned from data that is no longer available.

pub mod cerr;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod dpmm;
pub mod metrics;
pub mod mlp;
pub mod numerics;
pub mod replay;
pub mod suffstats;
pub mod trainer;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("matrix not positive-definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value in term `{term}`")]
    NonFinite { term: &'static str },
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
