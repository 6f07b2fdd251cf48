//! Reverse-mode differentiation with explicit gradient gating.
//!
//! Two independent cuts are available. [`Graph::stop_gradient`] severs a
//! single edge of the recorded graph, while the `groups` argument of
//! [`Graph::backward`] restricts which parameter groups receive gradient at
//! all. Together they express every routing rule the training objective
//! needs.

mod gradcheck;
mod graph;
mod param;
mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, relative_error, GradSample};
pub use graph::{Graph, Var};
pub use param::{GradSet, Group, GroupSet, ParamId, ParamStore, Parameter};
pub use tensor::{DType, Scalar, Tensor};

/// Names of the differentiable primitives exposed by [`Graph`].
pub fn primitive_set() -> &'static [&'static str] {
    &[
        "matmul",
        "bias_add",
        "conv2d",
        "upsample2x",
        "relu",
        "sigmoid",
        "global_avg_pool",
        "reshape",
        "concat",
        "add",
        "sub",
        "mul",
        "scale",
        "log",
        "exp",
        "softmax",
        "sum",
        "mean",
        "sq_diff_sum",
        "stop_gradient",
    ]
}
