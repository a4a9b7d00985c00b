//! Command-line driver for TSDE experiments: config parsing, experiment
//! runs, CSV output and log-log slope fitting.

// NaN must fail validation, hence `!(x > 0.0)` over `x <= 0.0`.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod error;
pub mod runner;
pub mod slope;
