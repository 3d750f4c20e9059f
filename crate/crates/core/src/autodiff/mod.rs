//! Differentiation machinery: dual numbers for functional derivatives, a
//! tensor tape for operator training, and the optimizer.

mod adam;
mod dual;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use dual::{Dual, Scalar};
pub use tape::{forward_jvp, reverse_gradient, ConstMatrix, Gradients, Tape, Tensor, Var};
