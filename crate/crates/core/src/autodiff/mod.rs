//! Minimal reverse-mode differentiation for vectors and matrices.

mod check;
mod grad_norm;
mod tape;

pub use check::{finite_difference_gradient, max_relative_error};
pub use grad_norm::{grad_of_grad_norm, linear_head_grad_norm, GradNorm, HeadLoss, NormKind};
pub use tape::{sigmoid, softplus, Gradients, Tape, Var};

pub(crate) use tape::pairwise_sq_dists;
