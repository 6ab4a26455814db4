//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]. Nodes are
//! appended in execution order, so walking the tape from the loss node back to
//! index zero visits operations in reverse topological order. Each node keeps a
//! closure computing the vector-Jacobian product for its parents.
//!
//! ```
//! use chit_core::autodiff::Tape;
//! use chit_core::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::from_slice(&[1.0, 2.0, 3.0]));
//! let loss = x.square().sum();
//! let grads = loss.backward().unwrap();
//! assert_eq!(grads.get(&x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod ops;
mod spatial;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use ops::sigmoid as sigmoid_scalar;
pub use spatial::{valid_sample_mask, ConvGeometry};

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    shape: Vec<usize>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    generation: u64,
    consumed: bool,
}

/// Ordered record of executed operations. Cheap to clone (shared handle).
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    /// A leaf that receives gradients.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node. Variables created before the reset can no
    /// longer be combined with new ones.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.generation += 1;
        inner.consumed = false;
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            parents,
            backward,
            requires_grad,
            shape: value.shape().to_vec(),
        });
        Var {
            tape: self.clone(),
            id,
            generation: inner.generation,
            requires_grad,
            value: Rc::new(value),
        }
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// A tensor participating in a gradient graph.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
    generation: u64,
    requires_grad: bool,
    value: Rc<Tensor>,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Scalar value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.value.item()
    }

    /// A constant on the same tape.
    pub fn constant_like(&self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    /// Same value, cut off from the gradient graph.
    pub fn detach(&self) -> Var {
        self.tape.constant((*self.value).clone())
    }

    /// Runs the reverse pass from this scalar.
    pub fn backward(&self) -> Result<Gradients> {
        if self.value.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        let mut inner = self.tape.inner.borrow_mut();
        if inner.generation != self.generation {
            return Err(Error::TapeMismatch);
        }
        if inner.consumed {
            return Err(Error::BackwardTwice);
        }
        inner.consumed = true;

        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.id + 1];
        grads[self.id] = Some(Tensor::ones(self.shape()));
        for i in (0..=self.id).rev() {
            let node = &nodes[i];
            let (Some(bw), Some(g)) = (&node.backward, &grads[i]) else {
                continue;
            };
            let parent_grads = bw(g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].shape.as_slice());
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
        }
        for (i, slot) in grads.iter_mut().enumerate() {
            if slot.is_none() && nodes[i].requires_grad {
                *slot = Some(Tensor::zeros(&nodes[i].shape));
            }
            if !nodes[i].requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients {
            grads,
            generation: inner.generation,
        })
    }
}

/// Result of a reverse pass: one gradient per variable that requires it.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    generation: u64,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        if var.generation != self.generation {
            return None;
        }
        self.grads.get(var.id).and_then(Option::as_ref)
    }
}

/// Records a node whose parents may live on different tapes.
pub(crate) fn record(
    value: Tensor,
    parents: &[&Var],
    backward: impl Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
) -> Result<Var> {
    let first = parents[0];
    for p in &parents[1..] {
        if !first.tape.same(&p.tape) || p.generation != first.generation {
            return Err(Error::TapeMismatch);
        }
    }
    Ok(record_unchecked(value, parents, backward))
}

pub(crate) fn record_unchecked(
    value: Tensor,
    parents: &[&Var],
    backward: impl Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
) -> Var {
    let tape = &parents[0].tape;
    let requires_grad = parents.iter().any(|p| p.requires_grad);
    if requires_grad {
        let ids = parents.iter().map(|p| p.id).collect();
        tape.push(value, ids, Some(Box::new(backward)), true)
    } else {
        tape.push(value, Vec::new(), None, false)
    }
}
