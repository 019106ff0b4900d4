//! Branching flows: generative flows over variable-length sequences whose
//! elements split and die along a latent planar forest.
//!
//! The crate is organised bottom-up:
//!
//! - [`hazard`]: event-time distributions on `[0, 1]` and exact waiting-time draws.
//! - [`base`]: per-element base processes (OU bridge, interval discrete interpolant).
//! - [`latent`]: construction of the conditioning variable (augmented data,
//!   initial state, coalescent forest, anchors) and the split/delete operators.
//! - [`conditional`]: sampling the conditional path at a time `t` and its targets.
//! - [`objective`]: the three-term branching loss.
//! - [`model`]: a small regressor trained with a reverse-mode tape.
//! - [`sampler`]: Euler sampling of the marginal path.
//! - [`harness`]: toy data, evaluation, configuration, checkpoints, self tests.

// `!(x >= 0.0)` style checks also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod base;
pub mod conditional;
pub mod error;
pub mod harness;
pub mod hazard;
pub mod latent;
pub mod model;
pub mod objective;
pub mod rng;
pub mod sampler;

pub use error::{Error, Result};
