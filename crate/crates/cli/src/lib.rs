//! Command-line front end: bound campaigns, runs, trigger ablations and
//! cross-seed reports.
//!
//! Exit codes: 0 when every check passes, 1 on a scientific failure (a bound
//! violated or a run aborted), 2 on a usage, configuration or I/O error.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod report;

pub use commands::Status;

pub const EXIT_USAGE: i32 = 2;
