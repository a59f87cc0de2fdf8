//! Dense tensors, reverse-mode differentiation and the finite-difference
//! gradient oracle.

mod gradcheck;
pub mod nn;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, relative_error, GradCheckReport, ParamCheck, Stencil};
pub use nn::{LayerNorm, Linear, Mlp};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::{gelu, sigmoid, softplus, Tensor, LN_EPS};
