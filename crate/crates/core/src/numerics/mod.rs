//! Dense `f64` tensors with a reverse-mode tape.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{sigmoid, Activation, Gradients, Reduce, Tape, Var, BCE_EPS, RATIO_FLOOR};
pub use tape::{cosine, dot};
pub use tensor::{kernel_execution, set_kernel_execution, Tensor};

#[cfg(test)]
mod tests;
