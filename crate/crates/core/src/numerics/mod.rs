//! Dense arrays, the differentiation tape, elementary kernels and the
//! finite-difference gradient oracle.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport, ParamReport};
pub use kernels::{layer_norm, sigmoid, softmax, softplus, top_k_indices};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
