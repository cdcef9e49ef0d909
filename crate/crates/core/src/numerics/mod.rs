//! Tensors, dense kernels, a reverse-mode tape and gradient checking.

pub mod gradcheck;
pub mod kernels;
pub mod ptk;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with, GradCheckConfig, GradCheckReport};
pub use kernels::{conv2d, conv3d, local_maxima, matmul, sigmoid, softmax_rows, transpose};
pub use tape::{Gradients, Tape, Var, PROB_EPS};
pub use tensor::Tensor;

