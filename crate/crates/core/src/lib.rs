//! Sparse-attention knowledge tracing.
//!
//! Predicts whether a student answers the next question correctly from
//! their interaction history. A single attention layer scores past
//! interactions against the current question; a k-sparse selection step
//! (soft cumulative threshold or top-k) keeps only the most relevant
//! ones before the weighted read-out, and a small MLP turns the read-out
//! into a probability.
//!
//! The crate is generic over the scalar type (`f32`/`f64` via
//! [`scalar::Scalar`]); the aliases below fix the default precision used
//! by the CLI and tests.

pub mod analysis;
pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod embeddings;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod heatmap;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod tape;
pub mod training;

/// Default scalar precision for the CLI and end-to-end paths.
pub type Real = f64;
/// Matrix at default precision.
pub type Mat = matrix::Matrix<Real>;
/// Autodiff tape at default precision.
pub type Tape = tape::Tape<Real>;
/// Model parameters at default precision.
pub type ModelParams = model::ModelParams<Real>;
/// Sparse-attention settings at default precision.
pub type SparseConfig = attention::SparseConfig<Real>;
/// Training settings at default precision.
pub type TrainConfig = training::TrainConfig<Real>;
/// Trained-model container at default precision.
pub type Checkpoint = training::Checkpoint<Real>;

pub use attention::{Renorm, SparseMode};
pub use data::{Dataset, InteractionSequence};
pub use error::{Error, Result};
