//! Reverse-mode differentiation over a linear tape of whole-tensor operations.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Per-operation vector-Jacobian product.
///
/// `needs[i]` tells whether input `i` wants a gradient; implementations may
/// return `None` for inputs that do not.
pub(crate) trait Backward<E: Element>: Send {
    fn backward(
        &self,
        grad_out: &Tensor<E>,
        inputs: &[&Tensor<E>],
        output: &Tensor<E>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>>;
}

struct Node<E: Element> {
    value: Arc<Tensor<E>>,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<Box<dyn Backward<E>>>,
}

/// Records values and the operations that produced them.
pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
    grad_enabled: bool,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never records backward closures (inference).
    pub fn no_grad() -> Self {
        Self {
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

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor<E>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && self.grad_enabled,
            parents: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an op output. The backward closure is kept only when some
    /// parent requires a gradient.
    pub(crate) fn push<B: Backward<E> + 'static>(
        &mut self,
        value: Tensor<E>,
        parents: &[Var],
        backward: B,
    ) -> Var {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let (parents, backward): (Vec<Var>, Option<Box<dyn Backward<E>>>) = if requires_grad {
            (parents.to_vec(), Some(Box::new(backward)))
        } else {
            (Vec::new(), None)
        };
        self.nodes.push(Node {
            value: Arc::new(value),
            requires_grad,
            parents,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        let node = self.nodes.get(loss.0).ok_or_else(|| {
            Error::State("backward called on a value that was never produced by a forward pass".into())
        })?;
        if !node.requires_grad {
            return Err(Error::State(
                "backward called but no differentiable forward pass was recorded".into(),
            ));
        }
        if node.value.len() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(node.value.shape().to_vec(), E::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.backward else { continue };
            let Some(grad_out) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor<E>> = node.parents.iter().map(|p| &*self.nodes[p.0].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let input_grads = op.backward(&grad_out, &inputs, &node.value, &needs)?;
            debug_assert_eq!(input_grads.len(), node.parents.len());
            for ((parent, g), need) in node.parents.iter().zip(input_grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[parent.0].value.shape());
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of leaves (and any intermediate left unconsumed) after backward.
pub struct Gradients<E: Element> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<E>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
