//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation in execution order. Each recorded node
//! owns its forward value and, when any input needs a gradient, a boxed
//! [`Backward`] rule. [`Graph::backward`] walks the tape once in reverse and
//! adds the resulting adjoints into per-node accumulators, so calling it twice
//! without [`Graph::zero_grads`] accumulates.
//!
//! ```
//! use ssc_core::autodiff::Graph;
//! use ssc_core::tensor::Tensor;
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.input(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
//! ```

mod conv;
mod index;
mod norm;
mod ops;

use std::collections::HashMap;

pub use conv::{Conv3dOpts, TapTable};
pub use index::SampleMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Values visible to a backward rule.
pub struct BackwardCx<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    /// `needs[i]` is false when input `i` does not require a gradient; rules may
    /// return `None` for it.
    pub needs: Vec<bool>,
}

/// Vector-Jacobian product of one recorded operation.
pub trait Backward<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (same length as the input's data), or
    /// `None` where the input needs none.
    fn backward(&self, cx: &BackwardCx<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward<T>>>,
    name: &'static str,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool, name: &'static str) -> Var {
        self.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            name,
            requires_grad,
        })
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true, "input")
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false, "constant")
    }

    /// Leaf holding a copy of a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), true, "param");
        self.params.insert(id, v);
        v
    }

    /// Records an operation. The rule is dropped when no input needs a gradient.
    pub fn record(
        &mut self,
        value: Tensor<T>,
        inputs: Vec<Var>,
        op: Box<dyn Backward<T>>,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let name = op.name();
        self.push(Node {
            value,
            inputs,
            op: requires_grad.then_some(op),
            name,
            requires_grad,
        })
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

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].name
    }

    /// Accumulated gradient of a node, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(grad) = adj[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if let Some(op) = &node.op {
                let cx = BackwardCx {
                    inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                    output: &node.value,
                    needs: node
                        .inputs
                        .iter()
                        .map(|v| self.nodes[v.0].requires_grad)
                        .collect(),
                };
                let input_grads = op.backward(&cx, &grad);
                debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.name);
                for (inp, g) in node.inputs.iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    if !self.nodes[inp.0].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(g.len(), self.nodes[inp.0].value.numel(), "{}", node.name);
                    accumulate(&mut adj[inp.0], g);
                }
            }
            accumulate(&mut self.grads[i], grad);
        }
        Ok(())
    }

    /// Gradients of every parameter leaf on this graph, ordered by parameter id.
    pub fn param_grads(&self) -> Vec<(ParamId, &[T])> {
        let mut out: Vec<(ParamId, &[T])> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| self.grads[v.0].as_deref().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub(crate) fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}
