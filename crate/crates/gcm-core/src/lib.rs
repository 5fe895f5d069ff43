//! Desk-scale laboratory for localizing and steering concept-mediating
//! attention heads in a small trainable transformer.
//!
//! The pipeline: generate a contrastive mode-switch dataset, train the toy
//! model, rank attention heads by causal mediation strength (activation
//! patching, attribution patching, knockouts, plus probe and random
//! baselines), steer the top-k% heads (mean, difference-in-means, or a
//! trained low-rank edit), judge the steered generations with deterministic
//! predicates, and sweep the (alpha, k) grid with nonparametric significance
//! tests over the results.

pub mod data;
pub mod error;
pub mod harness;
pub mod judge;
pub mod localize;
pub mod manifest;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod stats;
pub mod steer;
pub mod tensor;

pub use error::{GcmError, Result};
