//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and the handles
//! of its inputs. Inputs always precede their consumers, so a single reverse
//! sweep over the node list is a valid topological traversal.

use super::graph::Graph;
use super::kernels::{self, NormStats};
use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, kernel: Var, bias: Var },
    Depthwise { x: Var, kernel: Var, bias: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: NormStats<T> },
    Softmax { x: Var, axis: usize },
    Add(Var, Var),
    Mul(Var, Var),
    Gelu(Var),
    ChannelSlice { x: Var, start: usize },
    Concat(Vec<Var>),
    L2Normalize { x: Var, norms: Vec<T> },
    ChannelGram { key: Var, query: Var },
    Attend { attn: Var, value: Var },
    ScaleByElement { x: Var, scales: Var, index: usize },
    Sum(Var),
    Mse { pred: Var, target: Tensor<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// `None` when the leaf does not influence the loss or was created
    /// without `requires_grad`.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Registers a leaf that is never differentiated.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn get(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = kernels::sum(self.get(x));
        self.push(y, Op::Sum(x), &[x])
    }

    /// Mean squared error against a fixed target.
    pub fn mse(&mut self, pred: Var, target: Tensor<T>) -> Result<Var> {
        let y = kernels::mse(self.get(pred), &target)?;
        Ok(self.push(y, Op::Mse { pred, target }, &[pred]))
    }

    /// Reverse sweep from `loss`. Gradients accumulate additively where a
    /// value fans out to several consumers.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::invalid(format!("backward: unknown node {}", loss.0)))?;
        if !root.value.is_scalar() {
            return Err(Error::invalid(format!(
                "backward: loss must be a scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gi) in self.local_backward(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
        }

        // Only leaves keep their gradients.
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn local_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let v = |var: Var| self.get(var);
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            &Op::Conv2d { x, kernel, bias } => {
                let want_input = self.nodes[x.0].requires_grad;
                let (gx, gk, gb) = kernels::conv2d_backward_select(v(x), v(kernel), v(bias), g, want_input)?;
                let mut out = vec![(kernel, gk), (bias, gb)];
                out.extend(gx.map(|gx| (x, gx)));
                out
            }
            &Op::Depthwise { x, kernel, bias } => {
                let (gx, gk, gb) = kernels::depthwise_conv3x3_backward(v(x), v(kernel), v(bias), g)?;
                vec![(x, gx), (kernel, gk), (bias, gb)]
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let (gx, gg, gb) = kernels::layer_norm_backward(v(*x), v(*gamma), stats, g)?;
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            &Op::Softmax { x, axis } => vec![(x, kernels::softmax_backward(&node.value, axis, g)?)],
            &Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            &Op::Mul(a, b) => vec![(a, kernels::mul(g, v(b))?), (b, kernels::mul(g, v(a))?)],
            &Op::Gelu(x) => vec![(x, kernels::gelu_backward(v(x), g)?)],
            &Op::ChannelSlice { x, start } => {
                vec![(x, kernels::channel_slice_backward(v(x).shape(), start, g)?)]
            }
            Op::Concat(parts) => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let len = v(p).shape()[2];
                    out.push((p, kernels::channel_slice(g, start, len)?));
                    start += len;
                }
                out
            }
            Op::L2Normalize { x, norms } => {
                vec![(*x, kernels::l2_normalize_channels_backward(&node.value, norms, g)?)]
            }
            &Op::ChannelGram { key, query } => {
                let (gk, gq) = kernels::channel_gram_backward(v(key), v(query), g)?;
                vec![(key, gk), (query, gq)]
            }
            &Op::Attend { attn, value } => {
                let (ga, gv) = kernels::attend_backward(v(attn), v(value), g)?;
                vec![(attn, ga), (value, gv)]
            }
            &Op::ScaleByElement { x, scales, index } => {
                let xv = v(x);
                let s = v(scales).data()[index];
                let gx = Tensor::from_fn(xv.shape(), |i| g.data()[i] * s);
                let mut gs = Tensor::zeros(v(scales).shape());
                gs.data_mut()[index] = xv.data().iter().zip(g.data()).map(|(&a, &b)| a * b).sum();
                vec![(x, gx), (scales, gs)]
            }
            &Op::Sum(x) => vec![(x, Tensor::full(v(x).shape(), g.data()[0]))],
            Op::Mse { pred, target } => {
                let p = v(*pred);
                let scale = g.data()[0] * T::from_f64(2.0 / p.numel() as f64);
                let gp = Tensor::from_fn(p.shape(), |i| (p.data()[i] - target.data()[i]) * scale);
                vec![(*pred, gp)]
            }
        })
    }
}

impl<T: Element> Graph<T> for Tape<T> {
    type Value = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        self.get(*v)
    }

    fn conv2d(&mut self, x: &Var, kernel: &Var, bias: &Var) -> Result<Var> {
        let y = kernels::conv2d(self.get(*x), self.get(*kernel), self.get(*bias))?;
        let (x, kernel, bias) = (*x, *kernel, *bias);
        Ok(self.push(y, Op::Conv2d { x, kernel, bias }, &[x, kernel, bias]))
    }

    fn depthwise_conv3x3(&mut self, x: &Var, kernel: &Var, bias: &Var) -> Result<Var> {
        let y = kernels::depthwise_conv3x3(self.get(*x), self.get(*kernel), self.get(*bias))?;
        let (x, kernel, bias) = (*x, *kernel, *bias);
        Ok(self.push(y, Op::Depthwise { x, kernel, bias }, &[x, kernel, bias]))
    }

    fn layer_norm(&mut self, x: &Var, gamma: &Var, beta: &Var) -> Result<Var> {
        let (y, stats) = kernels::layer_norm(self.get(*x), self.get(*gamma), self.get(*beta))?;
        let (x, gamma, beta) = (*x, *gamma, *beta);
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            &[x, gamma, beta],
        ))
    }

    fn softmax(&mut self, x: &Var, axis: usize) -> Result<Var> {
        let y = kernels::softmax(self.get(*x), axis)?;
        Ok(self.push(y, Op::Softmax { x: *x, axis }, &[*x]))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = kernels::add(self.get(*a), self.get(*b))?;
        Ok(self.push(y, Op::Add(*a, *b), &[*a, *b]))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = kernels::mul(self.get(*a), self.get(*b))?;
        Ok(self.push(y, Op::Mul(*a, *b), &[*a, *b]))
    }

    fn gelu(&mut self, x: &Var) -> Result<Var> {
        let y = kernels::gelu(self.get(*x));
        Ok(self.push(y, Op::Gelu(*x), &[*x]))
    }

    fn channel_slice(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let y = kernels::channel_slice(self.get(*x), start, len)?;
        Ok(self.push(y, Op::ChannelSlice { x: *x, start }, &[*x]))
    }

    fn concat_channels(&mut self, parts: &[&Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|v| self.get(**v)).collect();
        let y = kernels::concat_channels(&tensors)?;
        let vars: Vec<Var> = parts.iter().map(|v| **v).collect();
        Ok(self.push(y, Op::Concat(vars.clone()), &vars))
    }

    fn l2_normalize_channels(&mut self, x: &Var) -> Result<Var> {
        let (y, norms) = kernels::l2_normalize_channels(self.get(*x))?;
        Ok(self.push(y, Op::L2Normalize { x: *x, norms }, &[*x]))
    }

    fn channel_gram(&mut self, key: &Var, query: &Var) -> Result<Var> {
        let y = kernels::channel_gram(self.get(*key), self.get(*query))?;
        Ok(self.push(
            y,
            Op::ChannelGram {
                key: *key,
                query: *query,
            },
            &[*key, *query],
        ))
    }

    fn attend(&mut self, attn: &Var, value: &Var) -> Result<Var> {
        let y = kernels::attend(self.get(*attn), self.get(*value))?;
        Ok(self.push(
            y,
            Op::Attend {
                attn: *attn,
                value: *value,
            },
            &[*attn, *value],
        ))
    }

    fn scale_by_element(&mut self, x: &Var, scales: &Var, index: usize) -> Result<Var> {
        let y = kernels::scale_by_element(self.get(*x), self.get(*scales), index)?;
        Ok(self.push(
            y,
            Op::ScaleByElement {
                x: *x,
                scales: *scales,
                index,
            },
            &[*x, *scales],
        ))
    }
}
