//! Dense tensors, reverse-mode autodiff, seeded randomness and the shared
//! similarity primitives.

mod gradcheck;
mod graph;
mod rng;
mod tensor;

pub use gradcheck::{check_gradient, grad_check};
pub use graph::{
    cosine_sim_matrix, l2_normalize_rows, sigmoid, softmax_rows, softplus, Backward, Gradients, Graph, Var,
    NORM_EPS,
};
pub use rng::Rng;
pub use tensor::Tensor;

use crate::error::Result;

/// Unit-norm copy of every row of `v`.
pub fn l2_normalize(v: &Tensor) -> Result<Tensor> {
    l2_normalize_rows(v).map(|(t, _)| t)
}

/// Softmax of each row of `v`.
pub fn softmax(v: &Tensor) -> Tensor {
    softmax_rows(v)
}

/// Inverse of the logistic function, with the argument clamped into
/// `[eps, 1 - eps]`.
pub fn inverse_sigmoid(p: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    (p / (1.0 - p)).ln()
}
