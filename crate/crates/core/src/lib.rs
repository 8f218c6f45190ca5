//! Fairness analysis for face verification.
//!
//! The crate works on tabular metadata: an attribute schema, an image table
//! and a table of verification pairs with embedding distances. On top of it
//! sit fairness metrics, TMR/FMR logit regressions with marginal effects,
//! a sequential ANOVA of latent distances, simulation-based residual
//! diagnostics, and a planner for demographically balanced generation.

// `!(a > b)` is used deliberately so NaN takes the failure branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anova;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod logit;
pub mod metrics;
pub mod planner;
pub mod report;
pub mod schema;
pub mod simulate;
pub mod svg;

pub use error::{Error, Result};
