//! Teacher-student semi-supervised object detection with two-step
//! pseudo-label filtering: object-wise contrastive learning regularizes the
//! classification scores used to select class pseudo-labels, and a learned
//! per-boundary aleatoric uncertainty selects box pseudo-labels.
//!
//! Everything runs on a small from-scratch autodiff engine over procedurally
//! generated scenes so that the whole pipeline trains on a laptop CPU.

pub mod autodiff;
pub mod boxes;
pub mod detector;
mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod scenes;
pub mod seeds;

pub use error::{Error, Result};
