//! Define-by-run reverse-mode differentiation.
//!
//! Every differentiable operation is a method on [`Tape`] that computes its
//! value eagerly and records a backward rule. [`Tape::backward`] walks the
//! recorded nodes once in reverse order and accumulates `∂loss/∂leaf` into the
//! gradient buffer of every leaf tensor that requires a gradient.

mod conv;
mod elementwise;
mod norm;
mod pool;
mod shape_ops;

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use conv::{conv2d_naive, conv_out_extent};
pub use norm::BatchStats;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
///
/// `needs[i]` tells whether input `i` participates in differentiation; rules
/// return `None` for inputs they were told to skip.
pub(crate) trait Backward: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    rule: Option<Box<dyn Backward>>,
    needs_grad: bool,
}

/// Ordered record of the operations of one forward pass.
///
/// Inputs of a node always precede it, so reverse insertion order is a valid
/// topological order for the backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

thread_local! {
    static CORRUPTED_RULE: Cell<Option<&'static str>> = const { Cell::new(None) };
}

/// Fault injection for mutation tests of the gradient checker.
#[doc(hidden)]
pub mod fault {
    use super::CORRUPTED_RULE;

    /// Scales every gradient produced by the named rule by 1.05 on this thread.
    pub fn corrupt_rule(name: Option<&'static str>) {
        CORRUPTED_RULE.with(|c| c.set(name));
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. It receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            inputs: Vec::new(),
            rule: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on a leaf by previous [`Tape::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    pub(crate) fn push(&mut self, value: Tensor, inputs: &[Var], rule: impl Backward + 'static) -> Var {
        debug_assert!(inputs.iter().all(|v| v.0 < self.nodes.len()));
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            rule: needs_grad.then(|| Box::new(rule) as Box<dyn Backward>),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagates `∂loss/∂·` back to every leaf that requires a gradient.
    ///
    /// Gradients are added to the leaves' existing buffers; callers zero them
    /// between steps.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let corrupted = CORRUPTED_RULE.with(|c| c.get());
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(rule) = &node.rule else {
                // Leaf: keep the gradient for the final write-back.
                grads[i] = Some(g);
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&j| self.nodes[j].needs_grad).collect();
            let mut input_grads = rule.backward(&inputs, &node.value, &g, &needs);
            if corrupted == Some(rule.name()) {
                for ig in input_grads.iter_mut().flatten() {
                    ig.iter_mut().for_each(|v| *v *= 1.05);
                }
            }
            for (&j, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[j].needs_grad {
                    continue;
                }
                debug_assert_eq!(ig.len(), self.nodes[j].value.len(), "{}", rule.name());
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(ig),
                }
            }
        }

        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &mut self.nodes[i];
                if node.rule.is_none() && node.value.requires_grad() {
                    node.value.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }
}
