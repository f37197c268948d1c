use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, SimError};
use crate::tensor::ops::{self, BatchNormMode, OpKind};
use crate::tensor::{Scalar, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    tape: u64,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

enum Node<T> {
    Leaf,
    Op {
        op: OpKind,
        inputs: Vec<usize>,
        saved: Vec<T>,
    },
}

struct Entry<T> {
    value: Tensor<T>,
    requires_grad: bool,
    node: Node<T>,
}

/// Reverse-mode differentiation tape.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it and a
/// reverse sweep over indices is a valid topological traversal. Ops whose inputs
/// carry no gradient keep their value but no backward record.
pub struct Tape<T> {
    id: u64,
    entries: Vec<Entry<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, node: Node<T>) -> Var {
        self.entries.push(Entry {
            value,
            requires_grad,
            node,
        });
        Var {
            index: self.entries.len() - 1,
            tape: self.id,
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Node::Leaf)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.entries.len() {
            return Err(SimError::ForeignVar(v.index));
        }
        Ok(v.index)
    }

    pub fn owns(&self, v: Var) -> bool {
        self.check(v).is_ok()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let i = self.check(v).expect("variable belongs to this tape");
        &self.entries[i].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.check(v).map(|i| self.entries[i].requires_grad).unwrap_or(false)
    }

    /// Evaluates `op` on `inputs` and records it when any input requires a gradient.
    pub fn apply(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var> {
        let idx = inputs
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>>>()?;
        let values: Vec<&Tensor<T>> = idx.iter().map(|&i| &self.entries[i].value).collect();
        let fwd = ops::forward(&op, &values)?;
        if !fwd.value.is_finite() {
            return Err(SimError::NonFinite { op: op.name() });
        }
        let requires_grad = idx.iter().any(|&i| self.entries[i].requires_grad);
        let node = if requires_grad {
            Node::Op {
                op,
                inputs: idx,
                saved: fwd.saved,
            }
        } else {
            Node::Leaf
        };
        Ok(self.push(fwd.value, requires_grad, node))
    }

    /// Accumulates `d root / d leaf` into every gradient-requiring leaf reachable from `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let r = self.check(root)?;
        let rv = &self.entries[r].value;
        if rv.numel() != 1 {
            return Err(SimError::NotScalar(rv.shape().to_vec()));
        }
        if self.grads.len() < self.entries.len() {
            self.grads.resize_with(self.entries.len(), || None);
        }
        let mut pending: Vec<Option<Tensor<T>>> = Vec::new();
        pending.resize_with(r + 1, || None);
        pending[r] = Some(Tensor::ones(rv.shape().to_vec()));
        for i in (0..=r).rev() {
            let Some(g) = pending[i].take() else { continue };
            let entry = &self.entries[i];
            if !entry.requires_grad {
                continue;
            }
            match &entry.node {
                Node::Leaf => match &mut self.grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                },
                Node::Op { op, inputs, saved } => {
                    let values: Vec<&Tensor<T>> = inputs.iter().map(|&j| &self.entries[j].value).collect();
                    let needs: Vec<bool> = inputs.iter().map(|&j| self.entries[j].requires_grad).collect();
                    let contributions = ops::backward(op, &values, &entry.value, saved, &g, &needs);
                    for (&j, c) in inputs.iter().zip(contributions) {
                        let Some(c) = c else { continue };
                        match &mut pending[j] {
                            Some(acc) => acc.add_assign(&c),
                            slot => *slot = Some(c),
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        let i = self.check(v).ok()?;
        self.grads.get(i).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        let i = self.check(v).ok()?;
        self.grads.get_mut(i).and_then(Option::take)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // Typed front-ends over `apply`.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Div, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Transpose, &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(OpKind::Permute(axes.to_vec()), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(OpKind::Reshape(shape.to_vec()), &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(OpKind::Concat { axis }, xs)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(OpKind::Slice { axis, start, end }, &[x])
    }

    pub fn gather(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        self.apply(
            OpKind::Gather {
                axis,
                indices: indices.to_vec(),
            },
            &[x],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sum { axis: None, keep_dim: false }, &[x])
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keep_dim: bool) -> Result<Var> {
        self.apply(OpKind::Sum { axis: Some(axis), keep_dim }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Mean { axis: None, keep_dim: false }, &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keep_dim: bool) -> Result<Var> {
        self.apply(OpKind::Mean { axis: Some(axis), keep_dim }, &[x])
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(OpKind::BroadcastTo(shape.to_vec()), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Exp, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Log, &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sqrt, &[x])
    }

    pub fn pow(&mut self, x: Var, p: f64) -> Result<Var> {
        self.apply(OpKind::Pow(p), &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::AddScalar(c), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Gelu, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::Softmax { axis }, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        self.apply(OpKind::LayerNorm { axis, eps }, &[x])
    }

    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        self.apply(OpKind::L2Normalize { axis, eps }, &[x])
    }

    /// Training-mode batch norm; also returns the batch mean and biased variance per channel.
    pub fn batch_norm_train(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<T>, Vec<T>)> {
        let y = self.apply(OpKind::BatchNorm(BatchNormMode::Train { eps }), &[x])?;
        let (mean, var) = batch_stats(self.value(x));
        Ok((y, mean, var))
    }

    pub fn batch_norm_eval(&mut self, x: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        let mode = BatchNormMode::Eval {
            mean: mean.iter().map(|v| v.f64()).collect(),
            var: var.iter().map(|v| v.f64()).collect(),
            eps,
        };
        self.apply(OpKind::BatchNorm(mode), &[x])
    }
}

fn batch_stats<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let c = *x.shape().last().unwrap_or(&1);
    let rows = x.numel() / c;
    let inv = T::one() / T::of(rows as f64);
    let mut mean = vec![T::zero(); c];
    for row in x.data().chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m = *m + v;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m * inv);
    let mut var = vec![T::zero(); c];
    for row in x.data().chunks_exact(c) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            *s = *s + (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s = *s * inv);
    (mean, var)
}
