//! Desk-scale federated learning simulator with per-client ownership
//! signatures.
//!
//! Clients jointly train a small classifier with federated averaging while
//! embedding private signatures: sign patterns over normalization scales or
//! kernel weights (checked with parameter access) and trigger sets (checked
//! through predictions only). The crate also decides whether a set of
//! signatures can coexist in one parameter vector, and measures how the
//! signatures survive pruning, fine-tuning, update noise and client
//! subsampling.

// `!(x > 0.0)` style checks are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod data;
pub mod error;
pub mod experiment;
pub mod feasibility;
pub mod federation;
pub mod io;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod train;
pub mod watermark;

pub use error::{Error, Result};
