//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so every node's inputs have
//! smaller indices than the node itself. [`Graph::backward`] walks the tape
//! once in reverse and releases each node's value as soon as its own
//! backward step has run.

mod conv;
mod norm;
mod ops;

use std::collections::HashMap;
use std::sync::Arc;

pub use conv::ConvSpec;
pub use norm::{BatchMoments, NormStats, BN_EPS};
pub use ops::logistic;

use crate::error::{Error, Result};
use crate::nn::ParamId;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) trait Backward<S: Scalar>: Send + Sync {
    /// Gradient for each parent; entries whose `needs` flag is false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<S>>>;
}

struct Node<S: Scalar> {
    value: Arc<Tensor<S>>,
    parents: Vec<Var>,
    op: Option<Box<dyn Backward<S>>>,
    requires_grad: bool,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    params: HashMap<ParamId, Var>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf input. Gradients are reported for it when `requires_grad`.
    pub fn input(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push_leaf(Arc::new(value), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.input(value, false)
    }

    /// Trainable parameter leaf; repeated calls for one id share a node.
    pub fn param(&mut self, id: ParamId, value: &Arc<Tensor<S>>, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push_leaf(Arc::clone(value), trainable);
        self.params.insert(id, v);
        v
    }

    fn push_leaf(&mut self, value: Arc<Tensor<S>>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), op: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<S>, parents: Vec<Var>, op: Box<dyn Backward<S>>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { Some(op) } else { None };
        self.nodes.push(Node { value: Arc::new(value), parents, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Fails with a numeric fault naming `layer` when `v` holds NaN or infinity.
    pub fn check_finite(&self, v: Var, layer: &str) -> Result<()> {
        if self.value(v).all_finite() {
            Ok(())
        } else {
            Err(Error::Numeric { layer: layer.to_string() })
        }
    }

    /// Reverse pass from a single-element `root`, consuming the tape.
    pub fn backward(mut self, root: Var) -> Gradients<S> {
        assert_eq!(self.value(root).numel(), 1, "backward root must be a scalar");
        let n = root.0 + 1;
        let mut grads: Vec<Option<Tensor<S>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), S::one()));
        let mut leaves = HashMap::new();
        let released: Arc<Tensor<S>> = Arc::new(Tensor::zeros(&[0]));

        for i in (0..n).rev() {
            let Some(grad) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                None => {
                    leaves.insert(Var(i), grad);
                }
                Some(op) => {
                    let inputs: Vec<&Tensor<S>> = node.parents.iter().map(|p| &*self.nodes[p.0].value).collect();
                    let needs: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
                    let parent_grads = op.backward(&inputs, &node.value, &grad, &needs);
                    let parents = node.parents.clone();
                    for ((p, g), need) in parents.into_iter().zip(parent_grads).zip(needs) {
                        let Some(g) = g else { continue };
                        if !need {
                            continue;
                        }
                        match &mut grads[p.0] {
                            Some(acc) => acc.add_assign(&g),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
            let node = &mut self.nodes[i];
            node.op = None;
            node.value = Arc::clone(&released);
        }
        Gradients { leaves, params: self.params }
    }
}

pub struct Gradients<S: Scalar> {
    leaves: HashMap<Var, Tensor<S>>,
    params: HashMap<ParamId, Var>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient w.r.t. a leaf; `None` when the leaf did not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.leaves.get(&v)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.params.get(&id).and_then(|v| self.leaves.get(v))
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }
}

fn need_shape(context: &str, expected: &[usize], actual: &[usize]) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::shape(context, expected, actual))
    }
}
