//! Dense `f64` tensors, a reverse-mode differentiation tape, Adam, and
//! finite-difference gradient checking.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamCheck, GRAD_CHECK_TOLERANCE};
pub use params::{AdamConfig, AdamState, ParamId, ParamSet, Parameter};
pub use tape::{softmax_in_place, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Standard deviation of the Gaussian used for weight initialisation.
pub const INIT_STD: f64 = 0.02;

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;
