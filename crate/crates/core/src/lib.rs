//! Detection and intervention toolkit for transfer neurons in gated-MLP
//! decoder transformers.
//!
//! Transfer neurons are MLP neurons whose activation-weighted value vectors
//! move residual-stream representations between language-specific latent
//! spaces and a shared semantic latent space. This crate provides the full
//! experimental loop around them:
//!
//! - [`store`]: the capture-run file format and in-memory data model for
//!   activations, value vectors, centroids, and neuron sets.
//! - [`model`]: a capture-and-intervene interface over any gated-MLP
//!   decoder, plus a synthetic planted-neuron fixture that serves as
//!   detection ground truth.
//! - [`corpus`]: parallel sentence corpora, QA datasets, train/test splits,
//!   and derangement-based non-parallel pairings.
//! - [`geometry`]: latent-space diagnostics (PCA, SVD dimensionality,
//!   centroids, similarity gap curves, mutual k-NN alignment, trajectory
//!   linearity, linear separability probe).
//! - [`detector`]: transfer-neuron scoring and ranking, and
//!   correlation-ratio detection of language-specific neurons.
//! - [`intervention`]: deactivation masks, re-measurement under masks, and
//!   cross-lingual deactivation effects.
//! - [`stats`]: correlation ratio, Jaccard overlap, one-way ANOVA, and the
//!   Mann-Whitney U test.
//! - [`evaluation`]: zero-shot QA with token-based F1 under the
//!   three-condition intervention protocol.

pub mod corpus;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod intervention;
pub mod model;
pub mod stats;
pub mod store;

pub use error::{Error, ErrorCategory, Result};
