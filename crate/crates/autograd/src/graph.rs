//! The computation graph (tape) and reverse-mode traversal.
//!
//! Nodes are appended in creation order, which is always a valid topological
//! order: an operation can only consume nodes that already exist. Backward
//! therefore walks the tape once, in reverse.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded operation.
///
/// `inputs` are the values of the node's inputs in the order they were
/// registered, `output` is the node's own value and `grad_out` is
/// dLoss/dOutput. `needs_grad[i]` tells whether input `i` is attached to a
/// trainable leaf; rules may skip work for inputs that are not. The rule
/// returns one entry per input; `None` means no contribution.
pub trait Operation<T: Element> {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
        needs_grad: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Element> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Operation<T>>>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Tape of values and backward rules for one forward pass.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Vec::new(), None, false)
    }

    /// A trainable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Vec::new(), None, true)
    }

    /// Copies the value of `v` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Records the result of an operation. The node requires gradient when
    /// any of its inputs does; otherwise the backward rule is dropped.
    pub fn push_op(&mut self, value: Tensor<T>, inputs: Vec<Var>, op: Box<dyn Operation<T>>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { Some(op) } else { None };
        self.push_node(value, inputs, op, requires_grad)
    }

    fn push_node(
        &mut self,
        value: Tensor<T>,
        inputs: Vec<Var>,
        op: Option<Box<dyn Operation<T>>>,
        requires_grad: bool,
    ) -> Var {
        debug_assert!(inputs.iter().all(|v| v.0 < self.nodes.len()));
        self.nodes.push(Node { value, inputs, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the operation that produced `v`, `None` for leaves and for
    /// nodes that do not require gradient.
    pub fn op_name(&self, v: Var) -> Option<&'static str> {
        self.nodes[v.0].op.as_ref().map(|op| op.name())
    }

    pub fn inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    /// Accumulated dLoss/dv; absent for constants and unreached nodes.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Gradients accumulate into every reached node; calling this twice
    /// without [`zero_grads`](Self::zero_grads) doubles them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(TensorError::Contract("backward from a loss that is not attached to any trainable leaf".into()));
        }

        let mut pending: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        pending.resize_with(loss.0 + 1, || None);
        pending[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(grad_out) = pending[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(op) = &node.op {
                let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
                let contributions = op.backward(&inputs, &node.value, &grad_out, &needs);
                debug_assert_eq!(contributions.len(), node.inputs.len(), "{}", op.name());
                for (input, contribution) in node.inputs.iter().zip(contributions) {
                    let Some(contribution) = contribution else { continue };
                    if !self.nodes[input.0].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(contribution.len(), self.nodes[input.0].value.numel(), "{}", op.name());
                    match &mut pending[input.0] {
                        Some(acc) => add_into(acc, &contribution),
                        slot @ None => *slot = Some(contribution),
                    }
                }
            }
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => add_into(acc, &grad_out),
                slot @ None => *slot = Some(grad_out),
            }
        }
        Ok(())
    }
}

pub(crate) fn add_into<T: Element>(acc: &mut [T], other: &[T]) {
    for (a, &b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}
