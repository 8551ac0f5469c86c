//! Causally regularized representation learning for unsupervised domain
//! adaptation.
//!
//! A fully connected feature extractor and classifier are trained on a
//! labelled source domain together with per-sample balancing weights. The
//! weights are chosen so that, for every representation dimension treated
//! as a binary treatment, the weighted means of the remaining dimensions
//! agree between its treated and control groups. Correlations that only
//! exist through confounders are thereby suppressed, and the classifier
//! leans on features whose effect on the label survives a shift to an
//! unlabelled target domain.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod balance;
pub mod binarize;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optimizer;
pub mod synthgen;

pub use error::{Error, Result};
