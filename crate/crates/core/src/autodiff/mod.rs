//! Minimal reverse-mode differentiation for the op set used by the model.

mod check;
pub mod suite;
mod tape;

pub use check::{
    central_differences, finite_difference_check, relative_error, GradCheckReport, DEFAULT_STEP,
    DEFAULT_TOLERANCE,
};
pub use tape::{Gradients, Tape, TapeNode, Var};
