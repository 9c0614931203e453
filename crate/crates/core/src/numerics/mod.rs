//! Dense tensors, reverse-mode gradients, Adam and finite-difference checking.

mod adam;
mod forward;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use forward::{Forward, Regularizer};
pub use gradcheck::{grad_check, GradCheck, GradCheckReport};
pub use graph::{Graph, OpKind, Var};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::{argmax, log_sum_exp, softmax, Tensor};

pub(crate) use tensor::lse_unchecked;

#[cfg(test)]
mod op_tests;
