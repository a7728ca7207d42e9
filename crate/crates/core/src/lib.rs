//! Selective state space models (Mamba-2 and the stripped-down MambaZero)
//! trained on random Markov chains, next to the Bayes-optimal add-β
//! estimator they learn to imitate in context.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: a small reverse-mode tape over rank ≤ 2 tensors.
//! - [`markov`]: random order-k kernels, sequences and the switching process.
//! - [`oracle`]: add-β smoothing and its switching-aware variant.
//! - [`model`]: the language-model stack, recurrent inference and gradients.
//! - [`construction`]: explicit MambaZero parameters that realize add-β for
//!   first-order chains, with an exhaustive verifier.
//! - [`train`]: cross-entropy, AdamW, cosine schedule and the training loop.
//! - [`metrics`]: KL, match curves, L1 distance, loss gap, sweeps.

// `!(x > 0.0)` checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod construction;
mod error;
pub mod markov;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod par;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
