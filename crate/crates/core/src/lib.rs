//! Bidirectional awareness induction (BAI) for autoregressive sequence models.
//!
//! The crate is `no_std` (with `alloc`) and holds every numerical piece of the
//! stack:
//!
//! - [`autodiff`]: a define-by-run reverse-mode differentiation graph over dense arrays.
//! - [`nn`]: parameters, attention, layer norm, feed-forward blocks and the cross-entropy head.
//! - [`model`]: transformer, static-expansion and decoder-only sequence models
//!   together with the pivot features each one exposes.
//! - [`bai`]: pivot length equalization, the reconstruction loss, the joint
//!   objective and the weight schedules.
//! - [`train`]: Adam, learning-rate schedules and the epoch loop.
//! - [`data`]: vocabularies, synthetic tasks and batching.
//! - [`decode`]: greedy and beam decoding, corpus BLEU and token accuracy.
//! - [`gradcheck`]: the central finite-difference harness.
//!
//! File formats, configuration parsing and the command line live in the
//! companion `bai-cli` crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]
// `!(x > 0.0)` is how validation rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod autodiff;
pub mod bai;
pub mod data;
pub mod decode;
mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
mod real;
pub mod rng;
mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
