//! Dense 64-bit tensors with a reverse-mode differentiation graph.

mod array;
pub mod gradcheck;
mod graph;
mod params;

pub use array::Tensor;
pub use gradcheck::{grad_check, grad_check_many, grad_check_params, jitter, relative_error, ParamCheck};
pub use graph::{conv_out_len, log_add, log_sum_exp, sigmoid, softplus, ConvGeom, Graph, Var};
pub use params::{glorot_uniform, ParamId, ParamStore};
