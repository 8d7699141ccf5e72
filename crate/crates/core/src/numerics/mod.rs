//! Tensors, reverse-mode differentiation and the optimizer used for training.

mod gradcheck;
mod kernels;
pub mod ops;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{
    grad_check, grad_check_many, grad_check_report, relative_error, DEFAULT_STEP, REL_ERROR_FLOOR,
};
pub use optim::{adam_step, cosine_lr, AdamState, ADAM_EPS, BETA1, BETA2};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
