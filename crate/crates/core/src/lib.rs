//! Event-triggered model-based reinforcement learning.
//!
//! The crate has two halves. The tabular half ([`mdp`], [`bounds`]) computes
//! returns, occupancies and model inconsistencies exactly so every
//! performance-difference bound can be checked numerically. The continuous
//! half ([`nn`], [`shift`], [`oracles`], [`engine`]) runs the Dyna-style loop
//! in which model retraining fires only when the estimated model shift
//! crosses a threshold.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod engine;
pub mod envs;
pub mod error;
pub mod mdp;
pub mod nn;
pub mod oracles;
pub mod rng;
pub mod shift;

pub use error::{Error, Result};
