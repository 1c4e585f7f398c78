use super::kernels;
use super::tensor::{Element, Tensor};
use crate::error::Result;

/// The operator set the fusion network is written against.
///
/// [`Tape`](super::Tape) records every call for reverse-mode differentiation;
/// [`Eager`] evaluates immediately and lets intermediates drop as soon as the
/// caller releases them, which is what inference on large images needs.
pub trait Graph<T: Element> {
    type Value;

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<T>;

    fn conv2d(&mut self, x: &Self::Value, kernel: &Self::Value, bias: &Self::Value) -> Result<Self::Value>;
    fn depthwise_conv3x3(
        &mut self,
        x: &Self::Value,
        kernel: &Self::Value,
        bias: &Self::Value,
    ) -> Result<Self::Value>;
    fn layer_norm(&mut self, x: &Self::Value, gamma: &Self::Value, beta: &Self::Value) -> Result<Self::Value>;
    fn softmax(&mut self, x: &Self::Value, axis: usize) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn gelu(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn channel_slice(&mut self, x: &Self::Value, start: usize, len: usize) -> Result<Self::Value>;
    fn concat_channels(&mut self, parts: &[&Self::Value]) -> Result<Self::Value>;
    fn l2_normalize_channels(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn channel_gram(&mut self, key: &Self::Value, query: &Self::Value) -> Result<Self::Value>;
    fn attend(&mut self, attn: &Self::Value, value: &Self::Value) -> Result<Self::Value>;
    fn scale_by_element(&mut self, x: &Self::Value, scales: &Self::Value, index: usize) -> Result<Self::Value>;
}

/// Immediate evaluation without gradient bookkeeping.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl<T: Element> Graph<T> for Eager {
    type Value = Tensor<T>;

    fn value<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }

    fn conv2d(&mut self, x: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::conv2d(x, kernel, bias)
    }

    fn depthwise_conv3x3(&mut self, x: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::depthwise_conv3x3(x, kernel, bias)
    }

    fn layer_norm(&mut self, x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::layer_norm(x, gamma, beta).map(|(y, _)| y)
    }

    fn softmax(&mut self, x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        kernels::softmax(x, axis)
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::add(a, b)
    }

    fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::mul(a, b)
    }

    fn gelu(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(kernels::gelu(x))
    }

    fn channel_slice(&mut self, x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
        kernels::channel_slice(x, start, len)
    }

    fn concat_channels(&mut self, parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        kernels::concat_channels(parts)
    }

    fn l2_normalize_channels(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::l2_normalize_channels(x).map(|(y, _)| y)
    }

    fn channel_gram(&mut self, key: &Tensor<T>, query: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::channel_gram(key, query)
    }

    fn attend(&mut self, attn: &Tensor<T>, value: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::attend(attn, value)
    }

    fn scale_by_element(&mut self, x: &Tensor<T>, scales: &Tensor<T>, index: usize) -> Result<Tensor<T>> {
        kernels::scale_by_element(x, scales, index)
    }
}
