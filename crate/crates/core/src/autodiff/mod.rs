//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Nodes are
//! appended in evaluation order, so the tape is always topologically sorted
//! and [`Tape::backward`] simply walks it in reverse.

mod ops;

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{LinearTaps, Window};
use crate::real::Real;
use crate::tensor::Tensor;

pub use ops::Reduction;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies one parameter tensor inside one parameter store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub store: u64,
    pub index: usize,
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        win: Window,
        cols: Vec<Vec<T>>,
    },
    Depthwise {
        x: usize,
        w: usize,
        b: Option<usize>,
        win: Window,
        padded: Vec<Vec<T>>,
    },
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Ln(usize),
    Sigmoid(usize),
    LeakyRelu(usize, T),
    Softmax(usize),
    LogSoftmax(usize),
    Upsample {
        x: usize,
        taps_h: LinearTaps,
        taps_w: LinearTaps,
    },
    Sum(usize),
    Mean(usize),
    GlobalAvgPool(usize),
    MulChannel {
        x: usize,
        gate: usize,
    },
    AddChannel {
        x: usize,
        bias: usize,
    },
    Concat(Vec<usize>),
    BatchNormTrain {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    BceWithLogits {
        x: usize,
        target: T,
        scale: T,
    },
    Nll {
        logp: usize,
        labels: Vec<u8>,
        ignore: u8,
        scale: T,
    },
}

#[derive(Debug)]
pub(crate) struct Node<T> {
    pub value: Arc<Tensor<T>>,
    pub op: Op<T>,
    pub requires_grad: bool,
    pub param: Option<ParamKey>,
}

/// Records primitives for one forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bound: BTreeMap<ParamKey, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Arc::new(value), false, None)
    }

    /// A leaf that collects a gradient (used by gradient checks).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Arc::new(value), true, None)
    }

    /// Bind a stored parameter. Binding the same key twice returns the same
    /// variable, so gradients from every use accumulate on one leaf.
    pub fn param(&mut self, key: ParamKey, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.leaf(value, requires_grad, Some(key));
        self.bound.insert(key, v);
        v
    }

    /// Copy of `v`'s value with no connection to the history that made it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.leaf(value, false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn leaf(&mut self, value: Arc<Tensor<T>>, requires_grad: bool, param: Option<ParamKey>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[usize],
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub(crate) fn node(&self, i: usize) -> &Node<T> {
        &self.nodes[i]
    }

    /// Reverse sweep from a scalar `loss`. The tape is left intact, so calling
    /// this twice yields the same gradients twice.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape().to_vec(), T::ONE));
        let mut leaves = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.push(LeafGrad {
                    var: Var(i),
                    param: node.param,
                    grad: g,
                });
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
        }
        leaves.reverse();
        Ok(Gradients { leaves })
    }

    pub(crate) fn accumulate(&self, grads: &mut [Option<Tensor<T>>], input: usize, g: Tensor<T>) -> Result<()> {
        if !self.nodes[input].requires_grad {
            return Ok(());
        }
        match &mut grads[input] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    pub(crate) fn wants_grad(&self, input: usize) -> bool {
        self.nodes[input].requires_grad
    }
}

#[derive(Debug, Clone)]
struct LeafGrad<T> {
    var: Var,
    param: Option<ParamKey>,
    grad: Tensor<T>,
}

/// Gradients of a loss with respect to every leaf that required one.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    leaves: Vec<LeafGrad<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.iter().find(|l| l.var == v).map(|l| &l.grad)
    }

    pub fn param(&self, key: ParamKey) -> Option<&Tensor<T>> {
        self.leaves
            .iter()
            .find(|l| l.param == Some(key))
            .map(|l| &l.grad)
    }

    /// Gradients of bound parameters, in binding order.
    pub fn params(&self) -> impl Iterator<Item = (ParamKey, &Tensor<T>)> {
        self.leaves
            .iter()
            .filter_map(|l| l.param.map(|k| (k, &l.grad)))
    }
}
