//! Dense matrices and a small reverse-mode differentiation tape.
//!
//! The operator set is exactly what the recommender needs; there is no
//! broadcasting beyond [`Tape::add_row`] and no higher-order derivatives.

pub mod check;
mod matrix;
mod tape;

pub use check::{finite_diff_check, finite_diff_report, GradCheckReport};
pub use matrix::Matrix;
pub use tape::{Binary, Gradients, Tape, Unary, Var};
