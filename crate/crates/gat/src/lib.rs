//! Desk-scale laboratory for guided adversarial training: multi-task
//! adversarial training with a gradient-curvature regularizer and
//! Pareto-optimal (MGDA) loss weighting, plus robustness diagnostics and
//! ablation harnesses.

pub mod attack;
pub mod augment;
pub mod data;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod train;
pub mod mgda;

pub use error::{GatError, Result};
