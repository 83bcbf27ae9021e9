//! Gradient tape: ordered operation records and the reverse sweep.

use std::cell::RefCell;
use std::rc::Rc;

use super::TensorBase;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Backward function of one node: maps the node's upstream gradient to one
/// optional contribution per parent (aligned with `Node::parents`).
pub(crate) type BackwardFn<S> = Box<dyn Fn(&[S]) -> Vec<Option<Vec<S>>>>;

struct Node<S: Scalar> {
    parents: Vec<usize>,
    backward: Option<BackwardFn<S>>,
    grad: Option<Vec<S>>,
    numel: usize,
}

struct TapeInner<S: Scalar> {
    nodes: Vec<Node<S>>,
    finished: bool,
}

/// Reverse-mode tape. Cloning yields another handle to the same tape.
///
/// Nodes are appended in forward order, so parents always precede children;
/// the backward sweep walks the list once in reverse.
pub struct TapeBase<S: Scalar> {
    inner: Rc<RefCell<TapeInner<S>>>,
}

impl<S: Scalar> Clone for TapeBase<S> {
    fn clone(&self) -> Self {
        TapeBase { inner: Rc::clone(&self.inner) }
    }
}

impl<S: Scalar> Default for TapeBase<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// A tensor's link to its tape node.
pub(crate) struct NodeRef<S: Scalar> {
    pub tape: TapeBase<S>,
    pub idx: usize,
}

impl<S: Scalar> Clone for NodeRef<S> {
    fn clone(&self) -> Self {
        NodeRef { tape: self.tape.clone(), idx: self.idx }
    }
}

impl<S: Scalar> TapeBase<S> {
    pub fn new() -> Self {
        TapeBase { inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new(), finished: false })) }
    }

    pub(crate) fn same_tape(&self, other: &TapeBase<S>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Attach a tensor as a differentiable leaf of this tape.
    pub fn watch(&self, t: &TensorBase<S>) -> TensorBase<S> {
        let idx = self.push(Vec::new(), None, t.numel());
        TensorBase {
            shape: t.shape().to_vec(),
            data: t.data_rc(),
            node: Some(NodeRef { tape: self.clone(), idx }),
        }
    }

    pub(crate) fn push(&self, parents: Vec<usize>, backward: Option<BackwardFn<S>>, numel: usize) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { parents, backward, grad: None, numel });
        inner.nodes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn grad_buffer(&self, idx: usize) -> Option<Vec<S>> {
        self.inner.borrow().nodes[idx].grad.clone()
    }

    /// Reverse sweep from a scalar output. Each node is visited exactly once;
    /// a tape supports a single backward pass.
    pub fn backward(&self, output: &TensorBase<S>) -> Result<()> {
        let node = output
            .node()
            .ok_or_else(|| Error::arg("backward target is not attached to a tape"))?;
        if !self.same_tape(&node.tape) {
            return Err(Error::arg("backward target belongs to a different tape"));
        }
        if output.numel() != 1 {
            return Err(Error::dim(format!(
                "backward target must be scalar, got shape {:?}",
                output.shape()
            )));
        }
        if !output.data()[0].is_finite() {
            return Err(Error::numeric("backward target is non-finite"));
        }
        let root = node.idx;
        let mut inner = self.inner.borrow_mut();
        if inner.finished {
            return Err(Error::arg("tape already consumed by a previous backward pass"));
        }
        inner.finished = true;
        inner.nodes[root].grad = Some(vec![S::one()]);

        for idx in (0..=root).rev() {
            let Some(backward) = inner.nodes[idx].backward.take() else { continue };
            let Some(upstream) = inner.nodes[idx].grad.clone() else { continue };
            let parents = inner.nodes[idx].parents.clone();
            let contributions = backward(&upstream);
            debug_assert_eq!(contributions.len(), parents.len());
            for (slot, contrib) in contributions.into_iter().enumerate() {
                let Some(c) = contrib else { continue };
                let p = parents[slot];
                let pn = &mut inner.nodes[p];
                debug_assert_eq!(c.len(), pn.numel);
                match &mut pn.grad {
                    Some(g) => {
                        for (gi, ci) in g.iter_mut().zip(c.iter()) {
                            *gi += *ci;
                        }
                    }
                    None => pn.grad = Some(c),
                }
            }
        }
        Ok(())
    }
}

/// Resolves the common tape of a set of op inputs, if any input is attached.
/// Mixing tensors from two different tapes is an error.
pub(crate) fn unify_tape<S: Scalar>(inputs: &[&TensorBase<S>]) -> Result<Option<TapeBase<S>>> {
    let mut found: Option<TapeBase<S>> = None;
    for t in inputs {
        if let Some(node) = t.node() {
            match &found {
                None => found = Some(node.tape.clone()),
                Some(tp) => {
                    if !tp.same_tape(&node.tape) {
                        return Err(Error::arg("operation mixes tensors from different tapes"));
                    }
                }
            }
        }
    }
    Ok(found)
}
