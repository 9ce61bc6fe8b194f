//! Metric-based one-/few-shot learners for the missing-word task.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: define-by-run reverse-mode differentiation over [`Tensor`]s.
//! - [`metrics`]: cosine, Minkowski, Euclidean and Poincaré scores.
//! - [`embeddings`]: max-pool pre-embedding and Full Context Embeddings.
//! - [`models`]: Matching, Prototypical, Relation and Siamese heads.
//! - [`episodes`]: corpus ingestion, label-word splits and the N-way
//!   k-shot episode sampler.
//! - [`training`]: optimisers, evaluation, checkpoints and the fit loop.

pub mod autodiff;
pub mod embeddings;
pub mod episodes;
pub mod error;
pub mod metrics;
pub mod models;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
