use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of a recorded op.
///
/// Receives the upstream gradient (flat, output-shaped), the input values and
/// the output value; returns one optional gradient per input.
pub type BackwardFn<T> = Box<dyn Fn(&[T], &[&Tensor<T>], &Tensor<T>) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    op: &'static str,
    value: Tensor<T>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    leaf: bool,
}

/// Linear record of primitive operations for reverse-mode differentiation.
///
/// Single-threaded: a tape must not be shared across threads while recording.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node. Outstanding [`Var`]s become invalid.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    /// Records a leaf. It participates in differentiation iff
    /// `t.requires_grad()`.
    pub fn leaf(&self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push_node("leaf", t, Vec::new(), None, rg, true)
    }

    /// Records a leaf that always tracks gradients.
    pub fn param(&self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    /// Records a leaf that never tracks gradients.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn get(&self, v: Var) -> Tensor<T> {
        let t = self.value(v).clone();
        t.with_requires_grad(false)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn tracks_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub(crate) fn any_tracks(&self, vs: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vs.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Number of recorded nodes carrying the given op tag.
    pub fn count_op(&self, op: &str) -> usize {
        self.nodes.borrow().iter().filter(|n| n.op == op).count()
    }

    fn push_node(
        &self,
        op: &'static str,
        value: Tensor<T>,
        parents: Vec<Var>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
        leaf: bool,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value: value.with_requires_grad(false),
            parents,
            backward,
            requires_grad,
            leaf,
        });
        Var(nodes.len() - 1)
    }

    /// Records an op whose output is `value`. The backward rule is kept only
    /// when some input tracks gradients.
    pub(crate) fn record(
        &self,
        op: &'static str,
        inputs: &[Var],
        value: Tensor<T>,
        backward: impl Fn(&[T], &[&Tensor<T>], &Tensor<T>) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Var {
        let rg = self.any_tracks(inputs);
        let bw: Option<BackwardFn<T>> = if rg { Some(Box::new(backward)) } else { None };
        self.push_node(op, value, inputs.to_vec(), bw, rg, false)
    }

    /// Records a precomputed value under an op tag without gradient
    /// tracking, so audits can still count it.
    pub fn record_constant(&self, op: &'static str, value: Tensor<T>) -> Var {
        self.push_node(op, value, Vec::new(), None, false, true)
    }

    /// Records a user-defined op with its own gradient rule. This is how
    /// straight-through estimators override the true derivative.
    pub fn custom(
        &self,
        op: &'static str,
        inputs: &[Var],
        value: Tensor<T>,
        backward: impl Fn(&[T], &[&Tensor<T>], &Tensor<T>) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Var {
        self.record(op, inputs, value, backward)
    }

    /// Reverse sweep from a scalar `loss`, visiting nodes in exact reverse
    /// recording order.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        let Some(root) = nodes.get(loss.0) else {
            return Err(Error::Contract("loss is not on this tape".into()));
        };
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if node.leaf {
                grads[i] = Some(g);
                continue;
            }
            let Some(bw) = &node.backward else { continue };
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|p| &nodes[p.0].value).collect();
            let pgrads = bw(&g, &inputs, &node.value);
            debug_assert_eq!(pgrads.len(), node.parents.len(), "op {}", node.op);
            for (p, pg) in node.parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                if !nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.len(), nodes[p.0].value.numel(), "op {}", node.op);
                match &mut grads[p.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&pg) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let mut out = Grads { leaves: Vec::new() };
        for (i, node) in nodes.iter().enumerate() {
            if node.leaf && node.requires_grad {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                out.leaves.push((Var(i), Tensor::from_parts(node.value.shape().to_vec(), g)));
            }
        }
        Ok(out)
    }
}

/// Gradients of every gradient-tracking leaf after a backward pass. Leaves
/// unreachable from the loss hold zeros.
#[derive(Debug)]
pub struct Grads<T> {
    leaves: Vec<(Var, Tensor<T>)>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves
            .binary_search_by_key(&v, |(k, _)| *k)
            .ok()
            .map(|i| &self.leaves[i].1)
    }

    /// Copies the gradient of `v` into `t.grad`.
    pub fn assign(&self, v: Var, t: &mut Tensor<T>) -> Result<()> {
        let g = self
            .get(v)
            .ok_or_else(|| Error::Contract("no gradient recorded for variable".into()))?;
        t.set_grad(g.data().to_vec())
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.leaves.iter().map(|(v, t)| (*v, t))
    }
}
