//! Dense `f64` reverse-mode automatic differentiation.

pub mod checkpoint;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckEntry, GradCheckReport, FD_STEP};
pub use params::{ParamKind, ParamStore, Parameter};
pub use tape::{column_moments, logsumexp, Gradients, NodeId, Tape, EPS};
pub use tensor::Tensor;
