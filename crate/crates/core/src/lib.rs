//! Learning the manifold of optimal solutions of non-convex objectives.
//!
//! Candidate solutions are drawn from a proposal distribution, scored, and
//! turned into importance weights. A latent-conditioned Gaussian model is
//! then fitted to the weighted samples with a capacity-controlled
//! variational loss, so that sweeping the latent variable traces a
//! continuum of near-optimal solutions.
//!
//! - [`objective`]: objective abstraction, toy test functions, score shaping.
//! - [`proposal`]: proposal distributions and importance weights.
//! - [`tinynet`]: dense ReLU networks with manual backprop and Adam.
//! - [`lsmo`]: the manifold model, weighted loss, and training loop.
//! - [`cem`]: cross-entropy method baseline with a Gaussian-mixture sampler.
//! - [`planning`]: 2D point-robot motion planning, CHOMP fine-tuning.

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cem;
pub mod error;
pub mod lsmo;
pub mod objective;
pub mod planning;
pub mod proposal;
pub mod tinynet;

pub use error::{Error, Result};
