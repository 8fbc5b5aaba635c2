//! Speaker-verification back-ends operating on precomputed embeddings.
//!
//! - [`model`]: the attention back-end (self-attention + attention pooling +
//!   calibrated cosine) with hand-derived gradients.
//! - [`objectives`] and [`trainer`]: the BCE/GE2E objective and its SGD loop.
//! - [`baselines`]: cosine scoring, LDA and Gaussian PLDA.
//! - [`metrics`]: EER, minDCF and DET points.
//! - [`data`]: embedding and trial files, synthetic data.
//! - [`scoring`]: trial lists scored with any back-end.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod codec;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod scoring;
pub mod trainer;

pub use error::{Error, Result};
