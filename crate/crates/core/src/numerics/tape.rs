use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{bail, Result};

pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Node ids are assigned in insertion order, which is also a topological
/// order. [`Tape::backward`] walks the nodes in strict reverse order.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a differentiable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.insert(Rc::new(value), Vec::new(), None, true)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert(Rc::new(value), Vec::new(), None, false)
    }

    fn insert(
        &self,
        value: Rc<Tensor>,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, parents, backward, requires_grad });
        Var { tape: self, id }
    }

    /// Records the result of an op. The backward closure maps the output
    /// gradient to one gradient buffer per parent, in parent order.
    pub(crate) fn push<'t>(
        &'t self,
        value: impl Into<Rc<Tensor>>,
        parents: &[Var<'t>],
        backward: impl Fn(&[f64]) -> Vec<Vec<f64>> + 'static,
    ) -> Result<Var<'t>> {
        let value = value.into();
        if cfg!(debug_assertions) && !value.all_finite() {
            bail!(NonFinite, "op produced a non-finite value (shape {:?})", value.shape());
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| {
                debug_assert!(std::ptr::eq(p.tape, self), "var from another tape");
                nodes[p.id].requires_grad
            })
        };
        let ids = parents.iter().map(|p| p.id).collect();
        let backward: Option<BackwardFn> = if requires_grad { Some(Box::new(backward)) } else { None };
        Ok(self.insert(value, ids, backward, requires_grad))
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Every differentiable leaf gets an entry in the result; leaves the loss
    /// does not depend on get zeros.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            bail!(Contract, "loss is recorded on a different tape");
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            bail!(Contract, "backward needs a scalar loss, got shape {:?}", nodes[loss.id].value.shape());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = vec![None; nodes.len()];

        for id in (0..nodes.len()).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[id].take() else {
                if node.parents.is_empty() {
                    leaves[id] = Some(Tensor::zeros(node.value.shape().to_vec()));
                }
                continue;
            };
            match &node.backward {
                None => {
                    leaves[id] = Some(Tensor::raw(node.value.shape().to_vec(), grad));
                }
                Some(f) => {
                    let parent_grads = f(&grad);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                        if !nodes[pid].requires_grad || pg.is_empty() {
                            continue;
                        }
                        match &mut grads[pid] {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, g)| *a += g),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Ok(Gradients { leaves })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf. Vars created after the backward call, constants and
    /// intermediate nodes have none.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.leaves.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, or zeros shaped like it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape().to_vec()))
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }
}
