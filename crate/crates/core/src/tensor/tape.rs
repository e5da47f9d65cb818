//! The recording tape: a dynamically built computation graph.
//!
//! Every forward pass builds a fresh [`Tape`]. Nodes are appended in
//! execution order, so the vector itself is a topological order and
//! [`Tape::backward`] is a single reverse sweep that visits each recorded
//! operation exactly once.

use super::{Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A recorded operation's backward rule.
///
/// Implementations read input values through [`Values`] and accumulate
/// input gradients through [`GradSink`]. `out_grad` is the gradient of the
/// loss with respect to this operation's output, in row-major order.
pub trait TapeOp {
    fn name(&self) -> &'static str;
    fn backward(&self, vals: &Values<'_>, out_grad: &[f64], sink: &mut GradSink<'_>);
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) requires_grad: bool,
    pub(crate) op: Option<Box<dyn TapeOp>>,
}

/// Read-only view of node values during the backward sweep.
pub struct Values<'a>(&'a [Node]);

impl Values<'_> {
    pub fn val(&self, v: Var) -> &Tensor {
        &self.0[v.0].value
    }
}

/// Gradient accumulator handed to backward rules.
///
/// `entry` returns `None` for nodes that do not require gradients, letting
/// expensive rules (convolution input gradients, in particular) skip work.
pub struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl GradSink<'_> {
    pub fn entry(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let numel = node.value.numel();
        Some(
            self.grads[v.0]
                .get_or_insert_with(|| vec![0.0; numel])
                .as_mut_slice(),
        )
    }
}

/// Mapping from registered parameters to their tape variables for one pass.
#[derive(Debug, Default)]
pub struct Bindings {
    pub(crate) vars: Vec<Var>,
}

impl Bindings {
    pub fn var(&self, id: super::ParamId) -> Var {
        self.vars[id.index()]
    }

    /// Bound variables in parameter-registration order.
    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

/// Dynamic computation tape. Rebuilt for every forward pass.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    ran_backward: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Add a leaf node holding `value`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_node(value, requires_grad, None)
    }

    /// Register `params` as leaves and return the per-parameter variables.
    pub fn bind(&mut self, params: &super::ParamSet) -> Bindings {
        let vars = params
            .iter()
            .map(|p| self.leaf(p.value.clone(), p.trainable))
            .collect();
        Bindings { vars }
    }

    /// Record a custom operation. `requires_grad` should be true when any
    /// input requires gradients; pass the result of [`Tape::any_requires`].
    pub fn push_op(
        &mut self,
        op: &'static str,
        value: Tensor,
        backward: Box<dyn TapeOp>,
        requires_grad: bool,
    ) -> Result<Var> {
        self.check_finite(op, &value)?;
        let backward = if requires_grad { Some(backward) } else { None };
        Ok(self.push_node(value, requires_grad, backward))
    }

    fn push_node(&mut self, value: Tensor, requires_grad: bool, op: Option<Box<dyn TapeOp>>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` call with respect to `v`, if any.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.get(v.0)?.as_ref().map(|g| {
            Tensor::from_vec(self.nodes[v.0].value.shape(), g.clone()).expect("grad shape")
        })
    }

    pub fn grad_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }

    /// NaN/Inf guard, active in debug builds.
    pub(crate) fn check_finite(&self, op: &'static str, t: &Tensor) -> Result<()> {
        if cfg!(debug_assertions) && !t.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        Ok(())
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(TensorError::ForeignVar {
                index: v.0,
                len: self.nodes.len(),
            });
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients accumulate additively: a node used as input to several
    /// operations receives the sum of all its downstream contributions.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        self.check_var(loss)?;
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        self.grads.clear();
        self.grads.resize_with(self.nodes.len(), || None);
        self.ran_backward = true;
        if !loss_node.requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if let Some(op) = self.nodes[i].op.as_ref() {
                let mut sink = GradSink {
                    nodes: &self.nodes,
                    grads: &mut self.grads,
                };
                op.backward(&Values(&self.nodes), &g, &mut sink);
            }
            self.grads[i] = Some(g);
        }
        if cfg!(debug_assertions) {
            for (i, g) in self.grads.iter().enumerate() {
                if let Some(g) = g {
                    if !g.iter().all(|v| v.is_finite()) {
                        let _ = i;
                        return Err(TensorError::NonFinite { op: "backward" });
                    }
                }
            }
        }
        Ok(())
    }
}
