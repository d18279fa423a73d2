//! Synthetic data, masks, metrics, training and evaluation.

pub mod eval;
pub mod masks;
pub mod metrics;
pub mod run;
pub mod scene;
pub mod train;
