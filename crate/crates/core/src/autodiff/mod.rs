//! Reverse-mode differentiation over an append-only tape.
//!
//! A [`Tape`] records one node per differentiable operation together with
//! the forward context its backward rule needs. [`Var`] pairs a value with
//! the node that produced it; a `Var` without a node is a constant and never
//! receives or propagates gradient. [`Var::detach`] produces such a constant
//! from any variable, which is how block boundaries sever the error path.
//!
//! Operations whose inputs are all constants record nothing, so running a
//! network on constants with frozen parameters is a plain forward pass.

mod gradcheck;
mod ops;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use gradcheck::{
    analytic_gradient, compare_gradients, grad_check, numeric_gradient, Coordinate,
    GradCheckConfig, GradCheckReport,
};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

impl NodeId {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Stable identity of a trainable parameter within a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub u32);

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

#[derive(Clone)]
pub struct Var<T> {
    value: Arc<Tensor<T>>,
    node: Option<NodeId>,
}

impl<T: Scalar> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("node", &self.node)
            .field("value", &self.value)
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    pub fn constant(value: Tensor<T>) -> Self {
        Self::from_arc(Arc::new(value))
    }

    pub fn from_arc(value: Arc<Tensor<T>>) -> Self {
        Self { value, node: None }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_arc(&self) -> &Arc<Tensor<T>> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same value (shared, bitwise identical), no gradient path.
    pub fn detach(&self) -> Self {
        Self {
            value: Arc::clone(&self.value),
            node: None,
        }
    }
}

/// Backward rule of one recorded operation.
pub trait BackwardRule<T> {
    /// Gradients with respect to each input, in input order. `needs[i]` is
    /// false for constant inputs; rules may skip those and return `None`.
    fn backward(&self, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<T> {
    inputs: Vec<Option<usize>>,
    rule: Option<Box<dyn BackwardRule<T>>>,
    shape: Vec<usize>,
    param: Option<ParamId>,
}

pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input variable.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var<T> {
        self.push_leaf(Arc::new(value), None)
    }

    /// Registers a parameter as a differentiable leaf. The value is shared,
    /// not copied.
    pub fn param(&mut self, value: &Arc<Tensor<T>>, id: ParamId) -> Var<T> {
        self.push_leaf(Arc::clone(value), Some(id))
    }

    fn push_leaf(&mut self, value: Arc<Tensor<T>>, param: Option<ParamId>) -> Var<T> {
        let index = self.nodes.len();
        self.nodes.push(Node {
            inputs: Vec::new(),
            rule: None,
            shape: value.shape().to_vec(),
            param,
        });
        Var {
            value,
            node: Some(NodeId {
                tape: self.id,
                index,
            }),
        }
    }

    /// Records `value = op(inputs)`. When no input carries a gradient path
    /// the result is a constant and nothing is recorded.
    pub fn record(
        &mut self,
        value: Tensor<T>,
        inputs: &[&Var<T>],
        rule: impl BackwardRule<T> + 'static,
    ) -> Result<Var<T>> {
        let mut ids = Vec::with_capacity(inputs.len());
        for v in inputs {
            match v.node {
                Some(n) if n.tape != self.id => {
                    return Err(Error::ForeignVariable {
                        expected: self.id,
                        found: n.tape,
                    })
                }
                Some(n) => ids.push(Some(n.index)),
                None => ids.push(None),
            }
        }
        if ids.iter().all(Option::is_none) {
            return Ok(Var::constant(value));
        }
        let index = self.nodes.len();
        self.nodes.push(Node {
            inputs: ids,
            rule: Some(Box::new(rule)),
            shape: value.shape().to_vec(),
            param: None,
        });
        Ok(Var {
            value: Arc::new(value),
            node: Some(NodeId {
                tape: self.id,
                index,
            }),
        })
    }
}

/// Gradients of one backward pass, for every leaf reached.
#[derive(Clone)]
pub struct Gradients<T> {
    by_node: BTreeMap<NodeId, Tensor<T>>,
    params: BTreeMap<ParamId, NodeId>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.node.and_then(|n| self.by_node.get(&n))
    }

    pub fn node(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.by_node.get(&id)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|n| self.by_node.get(n))
    }

    /// Parameter identities that received gradient, ascending.
    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

/// Reverse pass from a scalar `loss`. Each node is visited at most once, in
/// reverse recording order; fan-out contributions are summed in that order.
pub fn backward<T: Scalar>(tape: &Tape<T>, loss: &Var<T>) -> Result<Gradients<T>> {
    backward_seeded(tape, loss, T::one())
}

/// As [`backward`], with `d loss = seed` instead of 1.
pub fn backward_seeded<T: Scalar>(tape: &Tape<T>, loss: &Var<T>, seed: T) -> Result<Gradients<T>> {
    if loss.value.len() != 1 {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }
    let root = match loss.node {
        None => return Err(Error::LossNotOnTape),
        Some(n) if n.tape != tape.id => {
            return Err(Error::ForeignVariable {
                expected: tape.id,
                found: n.tape,
            })
        }
        Some(n) => n.index,
    };

    let mut pending: Vec<Option<Tensor<T>>> = Vec::new();
    pending.resize_with(root + 1, || None);
    pending[root] = Some(Tensor::full(loss.shape(), seed));

    let mut out = Gradients {
        by_node: BTreeMap::new(),
        params: BTreeMap::new(),
    };
    for index in (0..=root).rev() {
        let Some(grad) = pending[index].take() else {
            continue;
        };
        let node = &tape.nodes[index];
        let Some(rule) = &node.rule else {
            let id = NodeId {
                tape: tape.id,
                index,
            };
            if let Some(p) = node.param {
                out.params.insert(p, id);
            }
            out.by_node.insert(id, grad);
            continue;
        };
        let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
        let input_grads = rule.backward(&grad, &needs)?;
        for (input, g) in node.inputs.iter().zip(input_grads) {
            let (Some(j), Some(g)) = (input, g) else {
                continue;
            };
            if g.shape() != tape.nodes[*j].shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "backward",
                    lhs: tape.nodes[*j].shape.clone(),
                    rhs: g.shape().to_vec(),
                });
            }
            match &mut pending[*j] {
                Some(acc) => acc.add_assign(&g)?,
                slot => *slot = Some(g),
            }
        }
    }
    Ok(out)
}
