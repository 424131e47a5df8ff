//! Dense `f64` tensors and a small reverse-mode differentiation tape.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::gradient_check;
pub use kernels::{Unary, DEFAULT_LEAKY_SLOPE};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
