//! Tape-based reverse-mode differentiation over whole-tensor ops.
//!
//! A [`Tape`] records every forward op as a node holding its output value and
//! a backward closure object. [`Tape::backward`] walks nodes in reverse
//! creation order, so gradients are accumulated in a fixed order and two runs
//! over the same inputs are bit-identical. Tapes are built fresh for each
//! forward pass and never mutated in place.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded op.
pub trait Backward {
    /// Accumulates input gradients given the gradient of this op's output.
    fn backward(&self, grad_out: &[f64], ctx: &mut BackwardCtx<'_>);
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    param: Option<usize>,
    op: Option<Box<dyn Backward>>,
    name: &'static str,
}

/// Access to forward values and gradient buffers during the backward pass.
pub struct BackwardCtx<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl BackwardCtx<'_> {
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient buffer of `v`, allocated on first use.
    pub fn grad_mut(&mut self, v: Var) -> &mut [f64] {
        let n = self.nodes[v.0].value.numel();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    /// Value of `a` alongside the gradient buffer of `b`.
    pub fn value_and_grad(&mut self, a: Var, b: Var) -> (&Tensor, &mut [f64]) {
        let n = self.nodes[b.0].value.numel();
        let g = self.grads[b.0].get_or_insert_with(|| vec![0.0; n]);
        (&self.nodes[a.0].value, g)
    }

    /// Adds `src` into the gradient of `v`, if it requires one.
    pub fn accumulate(&mut self, v: Var, src: &[f64]) {
        if !self.requires_grad(v) {
            return;
        }
        let g = self.grad_mut(v);
        for (d, s) in g.iter_mut().zip(src) {
            *d += s;
        }
    }
}

/// Gradients of all leaves after a backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, Var)>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when no path reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v`, zero-filled when no path reached it.
    pub fn get_or_zero(&self, tape: &Tape, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
    }

    /// `(param id, var)` pairs for every parameter leaf on the tape.
    pub fn params(&self) -> &[(usize, Var)] {
        &self.params
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].name
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, false, None, "constant")
    }

    /// Differentiable input leaf.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, true, None, "input")
    }

    /// Parameter leaf tagged with its store id.
    pub fn param_leaf(&mut self, id: usize, value: Tensor) -> Result<Var> {
        self.push_leaf(value, true, Some(id), "param")
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<usize>, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        let mut value = value;
        value.grad = None;
        self.nodes.push(Node {
            value,
            requires_grad,
            param,
            op: None,
            name,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records the output of an op. Fails if the output is not finite.
    pub fn push_op(
        &mut self,
        name: &'static str,
        value: Tensor,
        inputs: &[Var],
        op: impl Backward + 'static,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            param: None,
            op: requires_grad.then(|| Box::new(op) as Box<dyn Backward>),
            name,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode pass seeded with d(root)/d(root) = 1 for every element.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.numel()]);
        for idx in (0..=root.0).rev() {
            let Some(op) = self.nodes[idx].op.as_ref() else {
                continue;
            };
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let mut ctx = BackwardCtx {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            op.backward(&g, &mut ctx);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, Var(i))))
            .collect();
        Gradients { grads, params }
    }
}
