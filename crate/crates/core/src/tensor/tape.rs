use super::ops::Op;
use super::Tensor;
use crate::error::{ensure, Result};

/// Handle to a node in a [`Tape`] arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Records values and operations for one forward pass.
///
/// Nodes are stored in insertion order, which is a topological order of
/// the computation; [`Tape::backward`] visits them in reverse.
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never records backward rules; every node is a constant.
    pub fn inference() -> Self {
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

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = self.grad_enabled;
        self.push_node(value, Op::Leaf, requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    /// Copies the values of `x` into a new gradient-free leaf. The copy
    /// takes part in forward values only; no backward rule links it to `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Pushes an operation result; the backward rule is kept only when some
    /// input needs a gradient.
    pub(crate) fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_node(value, op, requires_grad)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        ensure!(
            node.value.len() == 1,
            "backward needs a scalar loss, got shape {:?}",
            node.value.shape()
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if node.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !matches!(node.op, Op::Leaf) {
                node.op.backward(&self.nodes, &node.value, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by one [`Tape::backward`] sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Raw gradient buffer for `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v` shaped like its value; zeros when nothing reached it.
    pub fn tensor(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.shape(v).to_vec();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

/// Accumulates into the gradient slot of node `j`, allocating zeros on first use.
/// Returns `None` when `j` does not require a gradient.
pub(crate) fn slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    j: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[j].requires_grad {
        return None;
    }
    let len = nodes[j].value.len();
    Some(grads[j].get_or_insert_with(|| vec![0.0; len]))
}
