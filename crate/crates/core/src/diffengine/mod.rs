//! Reverse-mode automatic differentiation over dense tensors, restricted to the
//! operations used by the network and the losses.

mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{check_function, gradcheck, GradcheckReport, FD_STEP, GRADCHECK_OPS};
pub use tape::{Gradients, Tape, TvVariant, Var, GROUP_NORM_EPS, LOG_EPS, SQRT_EPS};
pub use tensor::Tensor;
