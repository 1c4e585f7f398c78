//! Minimal reverse-mode autodiff engine: exactly the operators the fusion
//! network needs, plus Adam and a cosine learning-rate schedule.

mod gemm;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod tape;
mod tensor;

pub use graph::{Eager, Graph};
pub use optim::{adam_step, cosine_lr, AdamState, CosineSchedule};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Element, Tensor};

use crate::error::Result;

pub fn conv2d<T: Element>(x: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    kernels::conv2d(x, kernel, bias)
}

pub fn depthwise_conv3x3<T: Element>(x: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    kernels::depthwise_conv3x3(x, kernel, bias)
}

pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    kernels::softmax(x, axis)
}

pub fn layer_norm<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    kernels::layer_norm(x, gamma, beta).map(|(y, _)| y)
}

/// Runs the reverse sweep of `tape` from the scalar `loss`.
pub fn backward<T: Element>(tape: &Tape<T>, loss: Var) -> Result<Gradients<T>> {
    tape.backward(loss)
}
