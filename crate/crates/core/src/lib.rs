//! Multi-view graph encoding and hierarchical gated fusion for aspect-level
//! sentiment classification.
//!
//! The crate is organised bottom-up:
//!
//! * [`matrix`] — a plain dense row-major matrix used for graphs, embeddings
//!   and parameters.
//! * [`graphs`] — ingestion of pre-parsed sentences and compilation of the
//!   AMR, dependency and constituency adjacency structures.
//! * [`autodiff`] — a small reverse-mode tape over [`matrix::Matrix`];
//!   everything differentiable in the model is built from its ops.
//! * [`params`] — named, seeded parameter storage with gradient accumulators.
//! * [`nn`] — the shared GCN layer, multi-head attention and the semantic
//!   adjacency built from attention scores.
//! * [`fusion`] — the three-level gated fusion stack plus cross-modal
//!   enhancement and the learnable level combination.
//! * [`contrastive`] — landmark selection and the margin / InfoNCE losses.
//! * [`model`] — parameter registration and the full per-example forward.
//! * [`train`] — configs, the optimizer, the training loop, evaluation
//!   metrics and the ablation harness.
//! * [`gradcheck`] — central-difference verification of analytic gradients.
//! * [`embed`] — the documented seeded stub-embedding hash.
//! * [`synth`] — the seeded synthetic fixture corpus generator.
//!
//! The crate is `no_std` (with `alloc`); all IO, file formats and the CLI
//! live in the companion `aspectfuse-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod contrastive;
pub mod embed;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graphs;
pub mod matrix;
pub mod model;
pub mod nn;
pub mod params;
pub mod synth;
pub mod train;

pub use error::CoreError;
pub use matrix::Matrix;

/// Shorthand for the crate-wide result type.
pub type Result<T> = core::result::Result<T, CoreError>;

pub(crate) fn cast<F: num_traits::Float>(x: f64) -> F {
    F::from(x).expect("f64 representable in target float")
}
