//! Define-by-run recording of tensor operations.
//!
//! Every forward operation appends a node holding its output value, the
//! [`Var`]s it consumed and a [`Backward`] rule. Nodes are only ever appended,
//! so operands always precede the nodes that use them and a reverse sweep
//! over the node list is a valid topological order.

use crate::error::{shape_err, Error, Result};
use crate::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
pub trait Backward<T: Real> {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (in input order). Inputs whose `needs`
    /// flag is false may be given `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Real> {
    value: Tensor<T>,
    parents: Vec<Var>,
    rule: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

/// Scales the gradients produced by every node of one named operation.
/// Used by the gradient-check harness to prove it catches broken rules.
#[derive(Clone, Debug, PartialEq)]
pub struct FaultInjection {
    pub op: String,
    pub scale: f64,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    fault: Option<FaultInjection>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn with_fault(fault: Option<FaultInjection>) -> Self {
        Self {
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that gradients are reported for.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            rule: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
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

    /// Name of the operation that produced `v`, `None` for leaves.
    pub fn op_name(&self, v: Var) -> Option<&'static str> {
        self.nodes[v.0].rule.as_ref().map(|r| r.name())
    }

    pub fn parents(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].parents
    }

    /// Appends an operation node. The value must be finite.
    pub fn record(
        &mut self,
        value: Tensor<T>,
        parents: &[Var],
        rule: Box<dyn Backward<T>>,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric { op: rule.name() });
        }
        debug_assert!(parents.iter().all(|p| p.0 < self.nodes.len()));
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.to_vec(),
            rule: Some(rule),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss`, returning the gradient of every
    /// node that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(root.value.shape().to_vec()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(rule) = node.rule.as_ref() else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            if needs.iter().any(|&n| n) {
                let inputs: Vec<&Tensor<T>> =
                    node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                let mut parent_grads = rule.backward(&inputs, &node.value, &grad, &needs);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                if let Some(fault) = &self.fault {
                    if fault.op == rule.name() {
                        let s = T::lit(fault.scale);
                        for g in parent_grads.iter_mut().flatten() {
                            *g = g.scale(s);
                        }
                    }
                }
                for ((p, g), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                    let (true, Some(g)) = (*need, g) else {
                        continue;
                    };
                    debug_assert_eq!(g.shape(), self.nodes[p.0].value.shape(), "{}", rule.name());
                    match &mut grads[p.0] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of the leaves reachable from a loss.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
