use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::ops::Op;

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) grad: Option<Tensor>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient, zeros if none has reached the node yet.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        node.grad.clone().unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Appends a computed node after checking its value is finite.
    pub(crate) fn emit(&mut self, value: Tensor, op: Op, what: &str) -> Result<Var> {
        value.check_finite(what)?;
        let requires_grad = op.parents().iter().any(|&p| self.requires_grad(p));
        Ok(self.push(value, op, requires_grad))
    }

    /// Back-propagates from a scalar node.
    ///
    /// Gradients of this pass are added to whatever each node already holds,
    /// so calling it twice without [`Graph::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape {
                op: "backward (loss must be scalar)",
                lhs: self.nodes[loss.0].value.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let contributions = self.nodes[i].op.backward(self, &self.nodes[i].value, &g)?;
            for (parent, pg) in contributions {
                if !self.requires_grad(parent) {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }
}
