//! plait: alternating detection and association for 3D multi-object tracking.
//!
//! The library implements a stacked decoder that interleaves detection-query
//! refinement with edge-augmented cross-attention data association, a
//! Hungarian-based track manager, the matching/loss scheme used to train the
//! decoder end-to-end over short sequences, a synthetic bird's-eye-view world
//! generator for producing test data, and a tracking-metric evaluator
//! (MOTA/AMOTA family). Everything runs on plain f64 with hand-written
//! backward passes so gradients can be audited against finite differences.

pub mod association;
pub mod config;
pub mod decoder;
pub mod experiment;
pub mod formats;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod simworld;
pub mod tensor;
pub mod tracker;
pub mod training;

/// Crate-wide error type. Programmer errors (shape mismatches, violated call
/// contracts) panic instead; this enum covers failures a caller can cause
/// through inputs: bad config, unreadable artifacts, numerical divergence.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("divergence: {0}")]
    Divergence(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse(_) => 2,
            Error::Divergence(_) => 3,
            Error::Io(_) => 1,
        }
    }
}
