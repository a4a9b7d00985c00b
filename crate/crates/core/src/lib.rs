//! Thompson sampling with dynamic episodes (TSDE) for restless
//! multi-armed bandits whose competitor is a known policy mapping.
//!
//! The crate is layered bottom-up:
//!
//! - [`markov`]: transition matrices, stationary distributions, n-step
//!   predictive distributions and mixing times.
//! - [`environment`]: the hidden restless process and the fully observed
//!   meta-state (last observed state, elapsed time) per arm.
//! - [`policies`]: index policies (best fixed arm, myopic, Whittle) and a
//!   small-instance value-iteration oracle.
//! - [`learner`]: factorised grid posterior, truncated visit counters and
//!   the episodic sampling loop.
//! - [`evaluation`]: average-reward estimation, regret curves, confidence
//!   diagnostics, span probe, bound overlay and log-log slopes.

// NaN must fail validation, hence `!(x > 0.0)` over `x <= 0.0`.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod environment;
pub mod error;
pub mod evaluation;
pub mod learner;
pub mod markov;
pub mod policies;
pub mod rng;

pub use error::{Error, Result};
