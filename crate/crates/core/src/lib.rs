//! Social recommendation with a dual-view lightweight graph encoder and a
//! learned cross-view denoising alignment loss.
//!
//! Two graphs are encoded with the same parameter-free propagation
//! `E^{(l)} = (𝓛 + I)·E^{(l-1)}`: the bipartite user-item graph and the
//! user-user social graph. A small projection network scores how related two
//! users are from their interaction-view embeddings, and that score weights a
//! hinge loss pulling their social-view embeddings together. Ties between
//! users with unrelated tastes therefore contribute little.
//!
//! Module map:
//!
//! - [`data`]: edge-file ingestion, leave-one-out splits, noise injection,
//!   degree strata.
//! - [`graph`]: normalized adjacency and propagation.
//! - [`model`]: parameters, encoder, similarities and scores.
//! - [`objective`]: batches, losses, gradients, Adam.
//! - [`eval`]: HR@N / NDCG@N and relevance-weight export.
//! - [`oracle`]: dense references and finite differences.
//! - [`train`] and [`experiment`]: the training loop and experiment tasks.
//! - [`synthetic`]: planted-cluster datasets with known structure.
//! - [`matrix`]: the dense row-major `f64` matrix used throughout.

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod graph;
pub mod matrix;
pub mod model;
pub mod objective;
pub mod oracle;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
