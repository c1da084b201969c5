use super::ops::Op;
use super::Tensor;
use crate::error::{NcgError, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(super) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(super) struct Node<F> {
    pub value: Tensor<F>,
    pub op: Op<F>,
    pub requires_grad: bool,
}

/// Linear record of executed operations.
///
/// Single owner, single thread. A tape is built by one forward pass and
/// consumed by one call to [`Tape::backward`]; recording any further op
/// starts a new forward pass.
pub struct Tape<F> {
    pub(super) nodes: Vec<Node<F>>,
    backward_done: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<F> {
        &self.nodes[var.0].value
    }

    pub fn op_name(&self, var: Var) -> &'static str {
        self.nodes[var.0].op.name()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Records a leaf. Gradients are tracked when the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, tensor: Tensor<F>) -> Result<Var> {
        if !tensor.is_finite() {
            return Err(NcgError::NonFinite { op: "leaf" });
        }
        let requires_grad = tensor.requires_grad();
        Ok(self.push_node(tensor, Op::Leaf, requires_grad))
    }

    pub fn param(&mut self, tensor: Tensor<F>) -> Result<Var> {
        self.leaf(tensor.with_grad())
    }

    pub fn constant(&mut self, mut tensor: Tensor<F>) -> Result<Var> {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    /// Copy of `var` cut off from the graph.
    pub fn detach(&mut self, var: Var) -> Result<Var> {
        let value = self.value(var).clone();
        self.constant(value)
    }

    pub(super) fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Result<Var> {
        if !value.is_finite() {
            return Err(NcgError::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_node(value, op, requires_grad))
    }

    fn push_node(&mut self, mut value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        value.set_requires_grad(requires_grad);
        self.backward_done = false;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Signs of every value fed to a leaky ReLU, in recording order. Two
    /// passes with equal signatures lie on the same linear piece.
    pub fn kink_signature(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::LeakyRelu { .. }))
            .flat_map(|n| {
                let x = n.op.inputs()[0];
                self.nodes[x.0].value.data().iter().map(|&v| v > F::zero())
            })
            .collect()
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        if self.backward_done {
            return Err(NcgError::BackwardTwice);
        }
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(NcgError::NonScalarLoss(loss_value.shape().to_vec()));
        }

        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        let mut visited = Vec::new();
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            visited.push(Var(i));
            let node = &self.nodes[i];
            if node.requires_grad {
                node.op
                    .backward(&self.nodes, &node.value, &g, &mut |var: Var, contrib: Vec<F>| {
                        if !self.nodes[var.0].requires_grad {
                            return;
                        }
                        match &mut grads[var.0] {
                            Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
                            slot @ None => *slot = Some(contrib),
                        }
                    });
            }
            grads[i] = Some(g);
        }
        self.backward_done = true;

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads, visited })
    }
}

/// Result of a reverse pass.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    visited: Vec<Var>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the loss with respect to `var`, or `None` when `var` does
    /// not require gradients or does not influence the loss.
    pub fn get(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but reads a missing gradient as zeros shaped
    /// like `like`.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor<F>) -> Tensor<F> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    /// Nodes that received a gradient, in the order the reverse pass
    /// processed them.
    pub fn visit_order(&self) -> &[Var] {
        &self.visited
    }
}
