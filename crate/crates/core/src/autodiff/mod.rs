//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Tape`] records each operation as it executes; [`Tape::backward`]
//! replays the records in reverse, applying each op's vector-Jacobian
//! product and accumulating gradients by the chain rule. Tapes are
//! single-use, single-owner objects: record once, differentiate once.
//!
//! Operations are open-ended: anything implementing [`TapeOp`] can be
//! recorded with [`Tape::apply`], so similarity losses and other custom
//! nodes plug into the same machinery as the built-in layer ops.

pub mod ops;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape_id: u64,
    index: usize,
}

/// A differentiable operation: forward from parent values, backward from the
/// output gradient to parent gradients.
pub trait TapeOp {
    /// Short name used in diagnostics.
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Vector-Jacobian product. `needs[i]` tells whether the i-th parent
    /// requires a gradient; entries for parents with `needs[i] == false`
    /// may be returned as `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    op: Option<Box<dyn TapeOp>>,
    needs_grad: bool,
}

/// Recorded computation graph.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    fn push(&mut self, node: Node) -> Var {
        let index = self.nodes.len();
        self.nodes.push(node);
        Var { tape_id: self.id, index }
    }

    /// Record a leaf that participates in differentiation (a parameter or an
    /// input whose gradient is requested).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Node { value, parents: Vec::new(), op: None, needs_grad: true })
    }

    /// Record a non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Node { value, parents: Vec::new(), op: None, needs_grad: false })
    }

    pub fn value(&self, var: Var) -> &Tensor {
        assert_eq!(var.tape_id, self.id, "Var used with a different tape");
        &self.nodes[var.index].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Execute `op` on `inputs` and record the result.
    pub fn apply(&mut self, op: Box<dyn TapeOp>, inputs: &[Var]) -> Result<Var> {
        let mut parents = Vec::with_capacity(inputs.len());
        let mut needs_grad = false;
        for v in inputs {
            if v.tape_id != self.id {
                return Err(Error::Autodiff(format!(
                    "{}: input Var belongs to a different tape",
                    op.name()
                )));
            }
            parents.push(v.index);
            needs_grad |= self.nodes[v.index].needs_grad;
        }
        let values: Vec<&Tensor> = parents.iter().map(|&i| &self.nodes[i].value).collect();
        let value = op.forward(&values)?;
        Ok(self.push(Node { value, parents, op: Some(op), needs_grad }))
    }

    /// Reverse sweep from a scalar root. Returns gradients for every
    /// differentiable leaf reachable from the root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.tape_id != self.id {
            return Err(Error::Autodiff("backward: root Var belongs to a different tape".into()));
        }
        let root_node = &self.nodes[root.index];
        if root_node.value.len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward: root must be scalar, got shape {:?}",
                root_node.value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.index] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.index).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };

            let parent_values: Vec<&Tensor> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> =
                node.parents.iter().map(|&p| self.nodes[p].needs_grad).collect();
            let grad_out = grads[idx].as_ref().unwrap();
            let parent_grads = op.backward(&parent_values, &node.value, grad_out, &needs)?;
            if parent_grads.len() != node.parents.len() {
                return Err(Error::Autodiff(format!(
                    "{}: backward returned {} gradients for {} parents",
                    op.name(),
                    parent_grads.len(),
                    node.parents.len()
                )));
            }
            for (slot, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if g.shape() != self.nodes[*slot].value.shape() {
                    return Err(Error::Autodiff(format!(
                        "{}: gradient shape {:?} does not match value shape {:?}",
                        op.name(),
                        g.shape(),
                        self.nodes[*slot].value.shape()
                    )));
                }
                match &mut grads[*slot] {
                    Some(acc) => acc.axpy(1.0, &g)?,
                    slot_g @ None => *slot_g = Some(g),
                }
            }
        }

        Ok(Gradients { tape_id: self.id, grads })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one reverse sweep, addressed by [`Var`].
pub struct Gradients {
    tape_id: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `var`.
    ///
    /// Errors if `var` comes from another tape or received no gradient
    /// (not differentiable, or not reached from the root).
    pub fn wrt(&self, var: Var) -> Result<&Tensor> {
        if var.tape_id != self.tape_id {
            return Err(Error::Autodiff("gradient requested for a Var not on this tape".into()));
        }
        self.grads
            .get(var.index)
            .and_then(|g| g.as_ref())
            .ok_or_else(|| Error::Autodiff(format!("no gradient recorded for node {}", var.index)))
    }

    /// Take ownership of the gradient for `var`, replacing it with `None`.
    pub fn take(&mut self, var: Var) -> Result<Tensor> {
        if var.tape_id != self.tape_id {
            return Err(Error::Autodiff("gradient requested for a Var not on this tape".into()));
        }
        self.grads
            .get_mut(var.index)
            .and_then(|g| g.take())
            .ok_or_else(|| Error::Autodiff(format!("no gradient recorded for node {}", var.index)))
    }
}
