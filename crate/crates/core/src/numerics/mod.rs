//! Dense tensors, the autodiff tape, and gradient verification.

mod check;
mod graph;
pub mod kernels;
mod params;
mod scalar;
mod tensor;

pub use check::{
    compare_grads, eval_loss, finite_difference_grad, grad, grad_mutated, Bindings, GradComparison,
};
pub use graph::{BackwardMutation, Gradients, Graph, Var, OP_NAMES};
pub use params::ParamSet;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

use crate::error::Result;

/// Eager single-sample convolution, `input[C_in,H,W]` against `kernel[C_out,C_in,kh,kw]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (x, k, b) = (
        g.constant(input.clone()),
        g.constant(kernel.clone()),
        g.constant(bias.clone()),
    );
    let y = g.conv2d(x, k, b, stride, padding)?;
    Ok(g.value(y).clone())
}

/// Eager layer norm over the last axis.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (xv, gv, bv) = (
        g.constant(x.clone()),
        g.constant(gamma.clone()),
        g.constant(beta.clone()),
    );
    let y = g.layer_norm(xv, Some(gv), Some(bv), eps)?;
    Ok(g.value(y).clone())
}
