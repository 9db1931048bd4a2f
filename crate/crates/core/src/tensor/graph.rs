//! The recording tape: a single-owner computation graph.
//!
//! Nodes are appended in execution order, so the vector itself is a
//! topological order and backward is one reverse sweep. Gradients
//! accumulate additively at fan-out points.

use super::{Result, Scalar, TensorData, TensorError};

/// Handle to a node in a [`Graph`]. Cheap to copy, only meaningful for the
/// graph that produced it.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<F: Scalar> {
    pub value: TensorData<F>,
    pub grad: Option<Vec<F>>,
    pub requires_grad: bool,
    pub op: Option<OpRecord<F>>,
}

/// Backward rule of one recorded operation. Receives the node that produced
/// the output (value + accumulated gradient) and the strictly-earlier prefix
/// of the tape, into which it accumulates parent gradients.
pub(crate) type BackwardFn<F> = Box<dyn Fn(&Node<F>, &[F], &mut [Node<F>])>;

pub(crate) struct OpRecord<F: Scalar> {
    pub backward: BackwardFn<F>,
}

impl<F: Scalar> Node<F> {
    /// Accumulate `contrib` into this node's gradient buffer.
    pub fn accumulate(&mut self, contrib: impl Iterator<Item = F>) {
        let grad = self
            .grad
            .get_or_insert_with(|| vec![F::ZERO; self.value.numel()]);
        for (g, c) in grad.iter_mut().zip(contrib) {
            *g += c;
        }
    }
}

pub struct Graph<F: Scalar> {
    pub(crate) nodes: Vec<Node<F>>,
    grad_enabled: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; no backward rules are kept.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf tensor. Gradients are tracked when `requires_grad` is
    /// set and the graph records gradients at all.
    pub fn leaf(&mut self, value: TensorData<F>, requires_grad: bool) -> Var {
        let rg = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: rg,
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Insert a constant (never differentiated).
    pub fn constant(&mut self, value: TensorData<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &TensorData<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    /// The accumulated gradient of `v`, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Detach: same value, no gradient history.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Record a new node. `backward` is dropped when no input needs
    /// gradients or the graph runs in inference mode.
    pub(crate) fn push_op(
        &mut self,
        value: TensorData<F>,
        parents_require: bool,
        backward: impl FnOnce() -> BackwardFn<F>,
    ) -> Var {
        let rg = parents_require && self.grad_enabled;
        let op = if rg {
            Some(OpRecord {
                backward: backward(),
            })
        } else {
            None
        };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: rg,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Reverse sweep from a scalar loss. Repeated calls without clearing
    /// gradients accumulate into the same buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: shape.to_vec(),
            });
        }
        if !self.nodes[loss.0].requires_grad {
            // Loss does not depend on any tracked tensor; nothing to do.
            return Ok(());
        }
        // Sweep over fresh buffers so a repeated call contributes exactly
        // one more pass, then merge into whatever had accumulated before.
        let saved: Vec<Option<Vec<F>>> = self.nodes.iter_mut().map(|n| n.grad.take()).collect();
        self.nodes[loss.0].accumulate(std::iter::once(F::ONE));
        for i in (0..=loss.0).rev() {
            let (prefix, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if let (Some(op), Some(grad)) = (&node.op, &node.grad) {
                (op.backward)(node, grad, prefix);
            }
        }
        for (node, old) in self.nodes.iter_mut().zip(saved) {
            if let Some(old) = old {
                match &mut node.grad {
                    Some(new) => {
                        for (n, o) in new.iter_mut().zip(old) {
                            *n += o;
                        }
                    }
                    None => node.grad = Some(old),
                }
            }
        }
        Ok(())
    }

    /// Drop every gradient buffer (the recorded ops stay usable).
    pub fn clear_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }
}
