//! Dense-matrix numerics with reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    grad_check, relative_error, GradCheckReport, DEFAULT_STEP, DEFAULT_TOL, RELATIVE_FLOOR,
};
pub use tape::{log_sum_exp, sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Additive floor on ratio denominators.
pub const DENOM_FLOOR: f64 = 1e-12;
