//! Reverse-mode automatic differentiation over dense tensors.

mod gradcheck;
pub mod kernels;
mod tape;

pub use gradcheck::{finite_diff_check, finite_diff_check_many, GradCheckReport};
pub use tape::{conv_out_len, BatchStats, Grads, Tape, Var};
