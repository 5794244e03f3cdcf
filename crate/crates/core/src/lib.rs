//! Learning mixtures of axis-aligned Gaussians with no separation assumption.
//!
//! The learner follows a candidate-list strategy:
//!
//! 1. [`wam`] enumerates a grid of guesses for the mixing weights and a few
//!    "seed" coordinate means, and linearly reconstructs the remaining means
//!    from pairwise product moments.
//! 2. [`candidates`] runs that generator twice, on the raw draws and on their
//!    squares, and crosses the two lists so every candidate carries weights,
//!    means and variances.
//! 3. [`convert`] clamps each candidate into the bounded parameter box and
//!    floors the weights, turning it into a genuine mixture with controlled
//!    pdf bounds.
//! 4. [`mlselect`] picks the candidate with the largest log-likelihood on
//!    draws from the box-truncated target.
//!
//! [`divergence`] provides closed-form, quadrature and Monte-Carlo KL
//! divergences used to check every stage, and [`pipeline`] wires the stages
//! together with an explicit [`pipeline::GridBudget`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod candidates;
pub mod convert;
pub mod divergence;
pub mod error;
pub mod io;
pub mod mlselect;
pub mod model;
pub mod pipeline;
pub mod quadrature;
pub mod rng;
pub mod sampling;
pub mod wam;

pub use error::{Error, Result};
pub use model::{Bounds, Component, Density, MixtureModel, TruncatedMixture};
pub use sampling::{SampleSet, Sampler};
