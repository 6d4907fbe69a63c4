//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in creation order,
//! which is already a topological order. [`Tape::backward`] walks the records
//! once in reverse, handing each node's upstream gradient to its
//! [`BackwardRule`]. Nodes whose inputs carry no gradient are stored as
//! constants and skipped.

mod ops;

pub use ops::{CrossEntropy, Embedding, LayerNorm, ScaleNorm};

use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inputs available to a backward rule.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a [f64],
    /// `needs[i]` is false when input `i` does not require a gradient.
    pub needs: Vec<bool>,
}

/// Vector-Jacobian product of one recorded operation.
///
/// Returns one entry per input; `None` for inputs that do not need a gradient.
pub trait BackwardRule {
    fn name(&self) -> &'static str;
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    rule: Option<Box<dyn BackwardRule>>,
    requires_grad: bool,
}

/// Operation record plus gradient store for one forward/backward pass.
///
/// Single-threaded; use one tape per worker.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    backward_done: Cell<bool>,
    attn_flops: Cell<u64>,
    fault: Cell<Option<&'static str>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("backward_done", &self.backward_done.get())
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf that accumulates a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.insert(value, Vec::new(), None, true)
    }

    /// Leaf without gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert(value, Vec::new(), None, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.insert(value, Vec::new(), None, requires_grad)
    }

    /// Records the output of an operation. When none of the inputs needs a
    /// gradient the rule is dropped and the node becomes a constant.
    pub fn record(
        &self,
        value: Tensor,
        inputs: &[Var<'_>],
        rule: Box<dyn BackwardRule>,
    ) -> Var<'_> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        if requires_grad {
            self.insert(value, ids, Some(rule), true)
        } else {
            self.insert(value, Vec::new(), None, false)
        }
    }

    fn insert(
        &self,
        value: Tensor,
        inputs: Vec<usize>,
        rule: Option<Box<dyn BackwardRule>>,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            inputs,
            rule,
            requires_grad,
        });
        Var { tape: self, id }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Attention FLOPs counted by attention ops recorded on this tape.
    pub fn attn_flops(&self) -> u64 {
        self.attn_flops.get()
    }

    pub(crate) fn add_attn_flops(&self, flops: u64) {
        self.attn_flops.set(self.attn_flops.get() + flops);
    }

    /// Fault injection for gradient-check negative controls: every gradient
    /// produced by rules named `rule_name` is scaled by 1.5.
    pub fn corrupt_backward(&self, rule_name: &'static str) {
        self.fault.set(Some(rule_name));
    }

    /// Backpropagates from a scalar `loss`, filling the gradient of every
    /// leaf created with `requires_grad`.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if self.backward_done.get() {
            return Err(Error::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::DetachedGraph);
        }
        let fault = self.fault.get();
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(rule) = node.rule.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                inputs: node.inputs.iter().map(|&i| &nodes[i].value).collect(),
                output: &node.value,
                grad: &grad,
                needs: node
                    .inputs
                    .iter()
                    .map(|&i| nodes[i].requires_grad)
                    .collect(),
            };
            let mut contributions = rule.backward(&ctx);
            if fault == Some(rule.name()) {
                for g in contributions.iter_mut().flatten() {
                    g.iter_mut().for_each(|x| *x *= 1.5);
                }
            }
            for (&input, contribution) in node.inputs.iter().zip(contributions) {
                let Some(contribution) = contribution else {
                    continue;
                };
                if !nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(contribution.len(), nodes[input].value.numel());
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        // Interior gradients were consumed on the way; only leaves remain.
        *self.grads.borrow_mut() = grads;
        self.backward_done.set(true);
        Ok(())
    }

    /// Gradient of a leaf after [`Tape::backward`]; zeros when the loss did not
    /// reach it, `None` when it does not require a gradient or backward has not run.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        if !node.requires_grad || !self.backward_done.get() {
            return None;
        }
        let grads = self.grads.borrow();
        let data = grads[var.id]
            .clone()
            .unwrap_or_else(|| vec![0.0; node.value.numel()]);
        Some(Tensor::from_parts(node.value.shape().to_vec(), data))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }
}

#[cfg(test)]
pub(crate) mod tests;
