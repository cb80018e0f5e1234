//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is built fresh for every forward pass. Parameters are stored
//! outside the tape as plain [`Tensor`]s and registered as leaves when a
//! pass begins; after [`Tape::backward`] their gradients are looked up by
//! the returned [`Var`] handles.
//!
//! Broadcasting is limited to a one-element operand against any tensor.
//! Row-bias addition has its own operation ([`Tape::add_bias`]).

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use tape::{CustomBackward, Elementwise, Gradients, Reduction, Tape, Var};
pub(crate) use tensor::matmul_kernel;
pub use tensor::Tensor;
