//! Training of large finite mixture models by stochastic component
//! selection.
//!
//! The crate fits mixtures `p(x) = sum_k pi_k p_{eta_k}(x | k)` by six
//! related maximum-likelihood algorithms built on one iteration loop:
//! classic EM, minibatch stochastic-approximation EM (SAEM), Monte-Carlo
//! SAEM (MCSAEM), sparse top-M selection (SSAEM), truncated distance-based
//! selection (TSAEM), and a Metropolis-Hastings SAEM (MHSAEM) that keeps a
//! persistent per-datapoint Markov chain over component assignments and
//! touches only the sampled components each iteration.
//!
//! Supporting modules provide the component families (full-covariance
//! Gaussians and an element-wise sinh-arcsinh flow), a synthetic generator
//! with a controllable pairwise-overlap level, run diagnostics (training
//! log-likelihood, gradient-estimator bias, average acceptance ratio,
//! iteration/time to 95% of peak likelihood), and checkpointing.

pub mod checkpoint;
pub mod data;
pub mod diag;
pub mod error;
pub mod math;
pub mod mh;
pub mod model;
pub mod rng;
pub mod schedule;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
