//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a linear tape: every operation appends one node holding its
//! output value and the information its backward rule needs. [`Graph::backward`]
//! walks the tape from the loss down to index 0, so operations are visited in
//! exact reverse execution order.
//!
//! Parameters are borrowed from a [`ParamStore`] rather than copied, which
//! keeps inference over frozen weights allocation-light and lets several
//! threads share one store.

mod ops;

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub use ops::{gelu_scalar, GELU_COEFF, SQRT_2_OVER_PI};
pub(crate) use ops::check_dropout_rate;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Gelu {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        multipliers: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum {
        x: Var,
    },
    GatherRows {
        src: Var,
        rows: Vec<usize>,
    },
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        heads: usize,
    },
    MaskedMeanPool {
        x: Var,
        mask: Vec<bool>,
        counts: Vec<usize>,
    },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op,
    requires_grad: bool,
}

/// The computation tape.
pub struct Graph<'a, T: Scalar = f32> {
    nodes: Vec<Node<'a, T>>,
    store: Option<&'a ParamStore<T>>,
    param_links: Vec<(ParamId, Var)>,
    grad_enabled: bool,
}

impl<'a, T: Scalar> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    /// A tape with gradient tracking and no parameter store.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            store: None,
            param_links: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that can reference the parameters of `store`.
    pub fn with_params(store: &'a ParamStore<T>) -> Self {
        Graph {
            store: Some(store),
            ..Graph::new()
        }
    }

    /// Disable gradient tracking: nothing will require grad and backward rules
    /// keep no saved state.
    pub fn no_grad(mut self) -> Self {
        self.grad_enabled = false;
        self
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

    /// Add an owned leaf.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Owned(value), requires_grad)
    }

    /// Add an owned leaf that never requires grad.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(Cow::Owned(value), false)
    }

    /// Add a borrowed leaf.
    pub fn leaf_ref(&mut self, value: &'a Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Borrowed(value), requires_grad)
    }

    /// Reference a parameter of the attached store.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let store = self
            .store
            .ok_or_else(|| Error::Usage("graph has no parameter store attached".into()))?;
        let p = store.get(id);
        let v = self.push_leaf(Cow::Borrowed(&p.value), p.requires_grad);
        self.param_links.push((id, v));
        Ok(v)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor<T>>, requires_grad: bool) -> Var {
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        v
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Take ownership of a node's value, cloning only when it is borrowed.
    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        let node = self.nodes.swap_remove(v.0);
        node.value.into_owned()
    }

    /// Run reverse-mode differentiation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut pending: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut kept: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visit_order = Vec::new();
        pending[loss.0] = Some(vec![T::one()]);

        for i in (0..n).rev() {
            let Some(grad) = pending[i].take() else { continue };
            visit_order.push(Var(i));
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(i, &grad, &mut pending)?;
            }
            if i == loss.0 || matches!(node.op, Op::Leaf) {
                kept[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), grad));
            }
        }
        Ok(Gradients {
            grads: kept,
            param_links: self.param_links.clone(),
            visit_order,
        })
    }

    fn accumulate(&self, pending: &mut [Option<Vec<T>>], target: Var, contribution: Vec<T>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut pending[target.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e = *e + c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }
}

/// Gradients produced by [`Graph::backward`].
///
/// Gradients are retained for leaves (including parameters) and for the loss.
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
    param_links: Vec<(ParamId, Var)>,
    visit_order: Vec<Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter, summed over every place the graph referenced it.
    pub fn param(&self, id: ParamId) -> Option<Tensor<T>> {
        let mut total: Option<Tensor<T>> = None;
        for &(pid, var) in &self.param_links {
            if pid != id {
                continue;
            }
            if let Some(g) = self.get(var) {
                match &mut total {
                    Some(t) => {
                        for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + *b;
                        }
                    }
                    None => total = Some(g.clone()),
                }
            }
        }
        total
    }

    /// Every parameter that received a gradient, in first-reference order.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        let mut seen = Vec::new();
        let mut out = Vec::new();
        for &(pid, _) in &self.param_links {
            if seen.contains(&pid) {
                continue;
            }
            seen.push(pid);
            if let Some(g) = self.param(pid) {
                out.push((pid, g));
            }
        }
        out
    }

    /// Nodes in the order backward processed them.
    pub fn visit_order(&self) -> &[Var] {
        &self.visit_order
    }
}
