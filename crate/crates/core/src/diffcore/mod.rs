//! Minimal reverse-mode differentiation over dense `f64` matrices.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use matrix::Matrix;
pub use tape::{sigmoid, softmax_into, Gradients, Tape, Var, GUARD_EPS};
