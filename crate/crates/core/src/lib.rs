//! Ensemble-token fusion of frozen task-prior encoders.
//!
//! A set of frozen encoders, each pre-trained on its own task, contributes one
//! pooled "prior token" per input. During training a learnable ensemble token
//! attends over a randomly thinned subset of those priors (the canonical
//! task's own token always survives); at inference only the canonical encoder
//! runs and the ensemble token carries what it absorbed.
//!
//! Modules, bottom-up:
//!
//! - [`tensor`]: dense tensors, reverse-mode tape, parameters, RNG
//! - [`nn`]: linear, multi-head self-attention, feed-forward, positional table
//! - [`fuser`]: prior-token assembly, drop mask, the fuser block
//! - [`tasks`]: synthetic multi-task data, frozen encoders, decoders, training
//! - [`metrics`]: evaluation metrics, reports and the FLOPs cost model
//! - [`cli`]: run configs, checkpoints and the `etf` subcommands

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod fuser;
pub mod metrics;
pub mod nn;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
