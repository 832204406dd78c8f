use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;

use crate::autodiff::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Recorded operation with whatever the backward rule needs.
#[derive(Debug)]
pub(crate) enum Op<S> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    BroadcastRows {
        x: Var,
    },
    Scale(Var, S),
    AddScalar(Var),
    Gelu(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax(Var),
    WeightedSoftmax {
        scores: Var,
        weights: Var,
        ratio: Vec<S>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    ReplaceRows {
        base: Var,
        rows: Var,
        pos: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<S>,
        probs: Vec<S>,
    },
    RowCosine {
        a: Var,
        b: Var,
        na: Vec<S>,
        nb: Vec<S>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<S>,
    },
    StraightThrough {
        soft: Var,
    },
}

pub(crate) struct Node<S> {
    pub value: Tensor<S>,
    pub op: Op<S>,
    pub needs_grad: bool,
}

/// Ordered record of differentiable operations.
///
/// Every op appends a node whose inputs were recorded earlier, so the node
/// vector is already in topological order. A tape supports exactly one
/// [`backward`](Tape::backward) pass.
pub struct Tape<S> {
    pub(crate) nodes: RefCell<Vec<Node<S>>>,
    bound: RefCell<HashMap<ParamId, Var>>,
    consumed: Cell<bool>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(256)),
            bound: RefCell::new(HashMap::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(&self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input leaf (gradient readable from [`Gradients`]).
    pub fn leaf(&self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter. Repeated calls return the same handle;
    /// frozen parameters are bound as constants.
    pub fn param(&self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.borrow().get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.trainable);
        self.bound.borrow_mut().insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<S>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub(crate) fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Copies the value out as a constant: gradients stop here.
    pub fn detach(&self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.consumed.replace(true) {
            return Err(Error::Tape("backward already ran on this tape"));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Tape("loss must be a scalar"));
        }
        if !root.value.is_finite() {
            return Err(Error::Tape("loss is not finite"));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), S::one()));
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            super::grad::propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(pid) if n.needs_grad => Some((pid, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Result of one backward pass.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    params: Vec<(ParamId, usize)>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a recorded value; `None` if it did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a value, zero-filled when it did not participate.
    pub fn get_or_zero(&self, tape: &Tape<S>, v: Var) -> Tensor<S> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }

    /// Adds parameter gradients into the store's grad buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<S>) {
        for &(pid, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.get_mut(pid).grad.axpy(S::one(), g);
            }
        }
    }
}
