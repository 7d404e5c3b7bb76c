//! Reverse-mode automatic differentiation over a dynamically recorded graph.
//!
//! A [`Graph`] is an append-only arena of nodes. Every forward operation
//! pushes one node holding its value and enough saved state to compute the
//! vector-Jacobian product later; [`Graph::backward`] walks the arena in
//! reverse. Handles ([`Var`]) are plain indices and only meaningful for the
//! graph that produced them.

pub mod conv;
mod ops;

pub use conv::KernelSpec;
pub use ops::BatchNormState;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Batch-norm behaviour: batch statistics (and running-stat updates) or
/// stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

pub(crate) enum Op<T> {
    Leaf,
    Conv { input: Var, weight: Var, bias: Var, spec: KernelSpec },
    Prelu { input: Var, slope: Var },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    MaxPool { input: Var, argmax: Vec<usize> },
    Upsample { input: Var, factor: usize },
    Softmax { input: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Concat { parts: Vec<Var> },
    Sum { input: Var },
    PadSpatial { input: Var },
    CropSpatial { input: Var },
    DiceLoss { prob: Var, target: Vec<T>, intersection: T, denominator: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Computation graph recorded during a forward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf (after [`Graph::backward`]).
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op_parents(&op).iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Leaf gradients accumulate across calls until [`Graph::zero_grad`];
    /// gradient-requiring leaves the loss does not depend on receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (parent, pg) in ops::vjp(self, i, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        for n in &mut self.nodes {
            if matches!(n.op, Op::Leaf) && n.requires_grad && n.grad.is_none() {
                n.grad = Some(Tensor::zeros(n.value.shape()));
            }
        }
        Ok(())
    }
}

fn op_parents<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Conv { input, weight, bias, .. } => vec![*input, *weight, *bias],
        Op::Prelu { input, slope } => vec![*input, *slope],
        Op::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
        Op::MaxPool { input, .. }
        | Op::Upsample { input, .. }
        | Op::Softmax { input }
        | Op::Sum { input }
        | Op::PadSpatial { input }
        | Op::CropSpatial { input } => vec![*input],
        Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
        Op::Concat { parts } => parts.clone(),
        Op::DiceLoss { prob, .. } => vec![*prob],
    }
}

#[cfg(test)]
mod tests;
