use std::cell::{Cell, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::dtype::Scalar;
use crate::error::{Error, Result};
use crate::tensor::{NodeRef, Tensor};

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

type BackwardFn<T> = Box<dyn Fn(&Tape<T>, &[T])>;

struct Node<T: Scalar> {
    backward: BackwardFn<T>,
}

/// Define-by-run recording of differentiable operations.
///
/// Every op that sees an enabled tape and at least one grad-requiring input
/// appends a node holding its backward rule; nodes are therefore in
/// topological order. `backward` replays them once, newest first.
///
/// A tape and the tensors recorded on it belong to one thread. Gradients of
/// intermediate values live in per-call scratch buffers; gradients of leaves
/// accumulate in the leaf tensors until explicitly zeroed.
pub struct Tape<T: Scalar> {
    id: u64,
    enabled: Cell<bool>,
    nodes: RefCell<Vec<Node<T>>>,
    scratch: RefCell<Vec<Option<Vec<T>>>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            enabled: Cell::new(true),
            nodes: RefCell::new(Vec::new()),
            scratch: RefCell::new(Vec::new()),
        }
    }

    /// A tape that records nothing: evaluation / no-grad mode.
    pub fn disabled() -> Self {
        let t = Self::new();
        t.enabled.set(false);
        t
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled.get()
    }

    pub fn set_enabled(&self, on: bool) {
        self.enabled.set(on);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop all recorded nodes (and the activations their closures hold).
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
        self.scratch.borrow_mut().clear();
    }

    pub(crate) fn should_record(&self, inputs: &[&Tensor<T>]) -> bool {
        self.enabled.get() && inputs.iter().any(|t| t.requires_grad())
    }

    pub(crate) fn record<F>(&self, out: &Tensor<T>, backward: F)
    where
        F: Fn(&Tape<T>, &[T]) + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node {
            backward: Box::new(backward),
        });
        out.set_node(NodeRef {
            tape: self.id,
            index,
        });
    }

    /// Route a gradient contribution to where `t`'s gradient lives: the
    /// scratch slot of its producing node (same tape), or the persistent
    /// buffer of a leaf.
    pub(crate) fn accumulate(&self, t: &Tensor<T>, g: Vec<T>) {
        match t.node() {
            Some(n) if n.tape == self.id => {
                let mut scratch = self.scratch.borrow_mut();
                match scratch[n.index].as_mut() {
                    Some(buf) => {
                        for (a, b) in buf.iter_mut().zip(&g) {
                            *a += *b;
                        }
                    }
                    None => scratch[n.index] = Some(g),
                }
            }
            _ => {
                if t.requires_grad() {
                    t.accumulate_grad(&g);
                }
            }
        }
    }

    /// Reverse pass from a scalar loss. Leaf gradients accumulate; calling
    /// this twice on the same loss doubles them.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::NotScalar {
                numel: loss.numel(),
            });
        }
        let n = self.nodes.borrow().len();
        {
            let mut scratch = self.scratch.borrow_mut();
            scratch.clear();
            scratch.resize_with(n, || None);
        }
        let seed = vec![T::one()];
        match loss.node() {
            Some(node) if node.tape == self.id => {
                self.scratch.borrow_mut()[node.index] = Some(seed);
            }
            _ => {
                // Loss is itself a leaf: its gradient is just 1.
                if loss.requires_grad() {
                    loss.accumulate_grad(&seed);
                }
                return Ok(());
            }
        }
        let nodes = self.nodes.borrow();
        for i in (0..n).rev() {
            let g = self.scratch.borrow_mut()[i].take();
            if let Some(g) = g {
                (nodes[i].backward)(self, &g);
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}
