//! Forward and backward rules for every operation the tape can record.

use rayon::prelude::*;

use crate::error::{Result, SimError};
use crate::tensor::kernels::{self, numel, split_axis};
use crate::tensor::scalar::{gemm, MatRef};
use crate::tensor::{Scalar, Tensor};

/// Operation catalog. Attributes are carried in `f64` regardless of element type.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    /// `[m,k]x[k,n]`, batched `[b,m,k]x[b,k,n]`, or `[..,k]x[k,n]` over flattened rows.
    MatMul,
    /// Swaps the last two axes.
    Transpose,
    Permute(Vec<usize>),
    Reshape(Vec<usize>),
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    /// Index select along `axis`; indices may repeat.
    Gather { axis: usize, indices: Vec<usize> },
    Sum { axis: Option<usize>, keep_dim: bool },
    Mean { axis: Option<usize>, keep_dim: bool },
    BroadcastTo(Vec<usize>),
    Exp,
    Log,
    Sqrt,
    Pow(f64),
    Scale(f64),
    AddScalar(f64),
    Gelu,
    Softmax { axis: usize },
    /// Standardises each lane along `axis` (no affine part).
    LayerNorm { axis: usize, eps: f64 },
    /// Channel axis is the last axis; statistics pool every other axis.
    BatchNorm(BatchNormMode),
    /// `x / max(||x||, eps)` along `axis`.
    L2Normalize { axis: usize, eps: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub enum BatchNormMode {
    Train { eps: f64 },
    Eval { mean: Vec<f64>, var: Vec<f64>, eps: f64 },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Permute(_) => "permute",
            OpKind::Reshape(_) => "reshape",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Gather { .. } => "gather",
            OpKind::Sum { .. } => "sum",
            OpKind::Mean { .. } => "mean",
            OpKind::BroadcastTo(_) => "broadcast",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sqrt => "sqrt",
            OpKind::Pow(_) => "power",
            OpKind::Scale(_) => "scale",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::Gelu => "gelu",
            OpKind::Softmax { .. } => "softmax",
            OpKind::LayerNorm { .. } => "layer_norm",
            OpKind::BatchNorm(_) => "batch_norm",
            OpKind::L2Normalize { .. } => "l2_normalize",
        }
    }

    pub(crate) fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::MatMul => Some(2),
            OpKind::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

/// Forward result: output value plus whatever the backward rule needs beyond inputs/output.
pub(crate) struct Forward<T> {
    pub value: Tensor<T>,
    pub saved: Vec<T>,
}

fn out<T: Scalar>(shape: Vec<usize>, data: Vec<T>) -> Result<Forward<T>> {
    Ok(Forward {
        value: Tensor::from_parts(shape, data),
        saved: Vec::new(),
    })
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(SimError::invalid(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    Ok(())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `sigmoid(2 sqrt(2/pi) (x + 0.044715 x^3))` per element.
fn gelu_gate<T: Scalar>(x: &[T]) -> Vec<T> {
    let (c2, a) = (T::of(-2.0 * GELU_C), T::of(GELU_A));
    let mut e: Vec<T> = x.iter().map(|&v| c2 * (v + a * v * v * v)).collect();
    T::exp_slice(&mut e);
    e.iter_mut().for_each(|v| *v = T::one() / (T::one() + *v));
    e
}

pub(crate) fn forward<T: Scalar>(op: &OpKind, inputs: &[&Tensor<T>]) -> Result<Forward<T>> {
    let name = op.name();
    if let Some(n) = op.arity() {
        if inputs.len() != n {
            return Err(SimError::invalid(
                name,
                format!("expected {n} inputs, got {}", inputs.len()),
            ));
        }
    }
    match op {
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            let shape = kernels::broadcast_shape(a.shape(), b.shape())
                .ok_or_else(|| SimError::shape(name, a.shape(), b.shape()))?;
            let data = match op {
                OpKind::Add => kernels::broadcast_binary(a.shape(), a.data(), b.shape(), b.data(), &shape, |x, y| x + y),
                OpKind::Sub => kernels::broadcast_binary(a.shape(), a.data(), b.shape(), b.data(), &shape, |x, y| x - y),
                OpKind::Mul => kernels::broadcast_binary(a.shape(), a.data(), b.shape(), b.data(), &shape, |x, y| x * y),
                _ => kernels::broadcast_binary(a.shape(), a.data(), b.shape(), b.data(), &shape, |x, y| x / y),
            };
            out(shape, data)
        }
        OpKind::MatMul => matmul_forward(inputs[0], inputs[1]),
        OpKind::Transpose => {
            let x = inputs[0];
            let r = x.rank();
            if r < 2 {
                return Err(SimError::invalid(name, format!("needs rank >= 2, got {:?}", x.shape())));
            }
            let mut axes: Vec<usize> = (0..r).collect();
            axes.swap(r - 2, r - 1);
            let (shape, data) = kernels::permute(x.data(), x.shape(), &axes);
            out(shape, data)
        }
        OpKind::Permute(axes) => {
            let x = inputs[0];
            let mut seen = vec![false; x.rank()];
            if axes.len() != x.rank() || axes.iter().any(|&a| a >= x.rank() || std::mem::replace(&mut seen[a], true)) {
                return Err(SimError::invalid(name, format!("{axes:?} is not a permutation of {:?}", x.shape())));
            }
            let (shape, data) = kernels::permute(x.data(), x.shape(), axes);
            out(shape, data)
        }
        OpKind::Reshape(shape) => {
            let x = inputs[0];
            if numel(shape) != x.numel() || shape.contains(&0) {
                return Err(SimError::shape(name, x.shape(), shape));
            }
            out(shape.clone(), x.data().to_vec())
        }
        OpKind::Concat { axis } => concat_forward(inputs, *axis),
        OpKind::Slice { axis, start, end } => {
            let x = inputs[0];
            check_axis(name, x.shape(), *axis)?;
            if start >= end || *end > x.shape()[*axis] {
                return Err(SimError::invalid(name, format!("range {start}..{end} invalid for shape {:?}", x.shape())));
            }
            let indices: Vec<usize> = (*start..*end).collect();
            gather_forward(x, *axis, &indices)
        }
        OpKind::Gather { axis, indices } => {
            let x = inputs[0];
            check_axis(name, x.shape(), *axis)?;
            if indices.is_empty() {
                return Err(SimError::invalid(name, "empty index list"));
            }
            if let Some(&bad) = indices.iter().find(|&&i| i >= x.shape()[*axis]) {
                return Err(SimError::invalid(name, format!("index {bad} out of range for shape {:?}", x.shape())));
            }
            gather_forward(x, *axis, indices)
        }
        OpKind::Sum { axis, keep_dim } | OpKind::Mean { axis, keep_dim } => {
            let x = inputs[0];
            let mean = matches!(op, OpKind::Mean { .. });
            match axis {
                None => {
                    let mut s: T = x.data().iter().copied().sum();
                    if mean {
                        s = s / T::of(x.numel() as f64);
                    }
                    let shape = if *keep_dim { vec![1; x.rank()] } else { Vec::new() };
                    out(shape, vec![s])
                }
                Some(axis) => {
                    check_axis(name, x.shape(), *axis)?;
                    let (outer, dim, inner) = split_axis(x.shape(), *axis);
                    let mut data = vec![T::zero(); outer * inner];
                    let src = x.data();
                    for o in 0..outer {
                        for j in 0..dim {
                            let row = &src[(o * dim + j) * inner..(o * dim + j + 1) * inner];
                            let dst = &mut data[o * inner..(o + 1) * inner];
                            for (d, &v) in dst.iter_mut().zip(row) {
                                *d = *d + v;
                            }
                        }
                    }
                    if mean {
                        let inv = T::one() / T::of(dim as f64);
                        data.iter_mut().for_each(|v| *v = *v * inv);
                    }
                    out(reduced_shape(x.shape(), *axis, *keep_dim), data)
                }
            }
        }
        OpKind::BroadcastTo(shape) => {
            let x = inputs[0];
            match kernels::broadcast_shape(x.shape(), shape) {
                Some(s) if &s == shape => out(shape.clone(), kernels::expand(x.data(), x.shape(), shape)),
                _ => Err(SimError::shape(name, x.shape(), shape)),
            }
        }
        OpKind::Exp => {
            let mut data = inputs[0].data().to_vec();
            T::exp_slice(&mut data);
            out(inputs[0].shape().to_vec(), data)
        }
        OpKind::Log => unary(inputs[0], |v| v.ln()),
        OpKind::Sqrt => unary(inputs[0], |v| v.sqrt()),
        OpKind::Pow(p) => {
            let p = T::of(*p);
            unary(inputs[0], move |v| v.powf(p))
        }
        OpKind::Scale(c) => {
            let c = T::of(*c);
            unary(inputs[0], move |v| v * c)
        }
        OpKind::AddScalar(c) => {
            let c = T::of(*c);
            unary(inputs[0], move |v| v + c)
        }
        OpKind::Gelu => {
            // 0.5 (1 + tanh u) = sigmoid(2u)
            let x = inputs[0];
            let s = gelu_gate(x.data());
            let data = x.data().iter().zip(&s).map(|(&v, &g)| v * g).collect();
            out(x.shape().to_vec(), data)
        }
        OpKind::Softmax { axis } => {
            let x = inputs[0];
            check_axis(name, x.shape(), *axis)?;
            let (outer, dim, inner) = split_axis(x.shape(), *axis);
            let mut data = x.data().to_vec();
            if inner == 1 {
                for row in data.chunks_exact_mut(dim) {
                    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                    row.iter_mut().for_each(|v| *v = *v - max);
                    T::exp_slice(row);
                    let inv = T::one() / row.iter().fold(T::zero(), |s, &v| s + v);
                    row.iter_mut().for_each(|v| *v = *v * inv);
                }
                return out(x.shape().to_vec(), data);
            }
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * dim * inner + i;
                    let mut max = T::neg_infinity();
                    for j in 0..dim {
                        max = max.max(data[base + j * inner]);
                    }
                    let mut total = T::zero();
                    for j in 0..dim {
                        let e = (data[base + j * inner] - max).exp();
                        data[base + j * inner] = e;
                        total = total + e;
                    }
                    let inv = T::one() / total;
                    for j in 0..dim {
                        data[base + j * inner] = data[base + j * inner] * inv;
                    }
                }
            }
            out(x.shape().to_vec(), data)
        }
        OpKind::LayerNorm { axis, eps } => {
            let x = inputs[0];
            check_axis(name, x.shape(), *axis)?;
            let (outer, dim, inner) = split_axis(x.shape(), *axis);
            let (data, saved) = standardize(x.data(), outer, dim, inner, T::of(*eps));
            Ok(Forward {
                value: Tensor::from_parts(x.shape().to_vec(), data),
                saved,
            })
        }
        OpKind::BatchNorm(mode) => {
            let x = inputs[0];
            let channels = *x.shape().last().unwrap_or(&1);
            let rows = x.numel() / channels;
            match mode {
                BatchNormMode::Train { eps } => {
                    if rows < 2 {
                        return Err(SimError::invalid(name, "training mode needs at least two rows per channel"));
                    }
                    // Viewed as [1, rows, channels]: lane = channel, strided by `channels`.
                    let (data, rstd) = standardize(x.data(), 1, rows, channels, T::of(*eps));
                    let mut saved = batch_means(x.data(), rows, channels);
                    saved.extend(rstd);
                    Ok(Forward {
                        value: Tensor::from_parts(x.shape().to_vec(), data),
                        saved,
                    })
                }
                BatchNormMode::Eval { mean, var, eps } => {
                    if mean.len() != channels || var.len() != channels {
                        return Err(SimError::shape(name, x.shape(), &[mean.len()]));
                    }
                    let shift: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();
                    let rstd: Vec<T> = var.iter().map(|&v| T::of(1.0 / (v + eps).sqrt())).collect();
                    let mut data = x.data().to_vec();
                    for row in data.chunks_exact_mut(channels) {
                        for ((v, &m), &r) in row.iter_mut().zip(&shift).zip(&rstd) {
                            *v = (*v - m) * r;
                        }
                    }
                    Ok(Forward {
                        value: Tensor::from_parts(x.shape().to_vec(), data),
                        saved: rstd,
                    })
                }
            }
        }
        OpKind::L2Normalize { axis, eps } => {
            let x = inputs[0];
            check_axis(name, x.shape(), *axis)?;
            let (outer, dim, inner) = split_axis(x.shape(), *axis);
            let eps = T::of(*eps);
            let mut data = x.data().to_vec();
            let mut norms = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * dim * inner + i;
                    let mut ss = T::zero();
                    for j in 0..dim {
                        let v = data[base + j * inner];
                        ss = ss + v * v;
                    }
                    let norm = ss.sqrt();
                    let inv = T::one() / norm.max(eps);
                    for j in 0..dim {
                        data[base + j * inner] = data[base + j * inner] * inv;
                    }
                    norms.push(norm);
                }
            }
            Ok(Forward {
                value: Tensor::from_parts(x.shape().to_vec(), data),
                saved: norms,
            })
        }
    }
}

fn reduced_shape(shape: &[usize], axis: usize, keep_dim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keep_dim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

fn unary<T: Scalar>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Result<Forward<T>> {
    out(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn batch_means<T: Scalar>(x: &[T], rows: usize, channels: usize) -> Vec<T> {
    let mut mean = vec![T::zero(); channels];
    for row in x.chunks_exact(channels) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m = *m + v;
        }
    }
    let inv = T::one() / T::of(rows as f64);
    mean.iter_mut().for_each(|m| *m = *m * inv);
    mean
}

/// Zero-mean, unit-variance (biased) standardisation of every lane; returns the
/// output and the per-lane reciprocal standard deviation.
fn standardize<T: Scalar>(x: &[T], outer: usize, dim: usize, inner: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let mut data = x.to_vec();
    let inv_dim = T::one() / T::of(dim as f64);
    let mut rstds = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        let block = o * dim * inner;
        let mut mean = vec![T::zero(); inner];
        for j in 0..dim {
            for (m, &v) in mean.iter_mut().zip(&data[block + j * inner..block + (j + 1) * inner]) {
                *m = *m + v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m * inv_dim);
        let mut var = vec![T::zero(); inner];
        for j in 0..dim {
            let row = &mut data[block + j * inner..block + (j + 1) * inner];
            for ((v, s), &m) in row.iter_mut().zip(var.iter_mut()).zip(&mean) {
                *v = *v - m;
                *s = *s + *v * *v;
            }
        }
        let rstd: Vec<T> = var.iter().map(|&s| T::one() / (s * inv_dim + eps).sqrt()).collect();
        for j in 0..dim {
            let row = &mut data[block + j * inner..block + (j + 1) * inner];
            for (v, &r) in row.iter_mut().zip(&rstd) {
                *v = *v * r;
            }
        }
        rstds.extend(rstd);
    }
    (data, rstds)
}

/// Backward of [`standardize`]:
/// `dx = rstd * (g - mean(g) - y * mean(g * y))` along each lane.
fn standardize_backward<T: Scalar>(y: &[T], g: &[T], rstd: &[T], outer: usize, dim: usize, inner: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    let inv_dim = T::one() / T::of(dim as f64);
    for o in 0..outer {
        let block = o * dim * inner;
        let mut mg = vec![T::zero(); inner];
        let mut mgy = vec![T::zero(); inner];
        for j in 0..dim {
            let r = block + j * inner..block + (j + 1) * inner;
            for ((a, b), (&gv, &yv)) in mg.iter_mut().zip(mgy.iter_mut()).zip(g[r.clone()].iter().zip(&y[r])) {
                *a = *a + gv;
                *b = *b + gv * yv;
            }
        }
        let lane_rstd = &rstd[o * inner..(o + 1) * inner];
        for j in 0..dim {
            let r = block + j * inner..block + (j + 1) * inner;
            for (t, d) in dx[r.clone()].iter_mut().enumerate() {
                let idx = r.start + t;
                *d = lane_rstd[t] * (g[idx] - mg[t] * inv_dim - y[idx] * mgy[t] * inv_dim);
            }
        }
    }
    dx
}

enum MatMulLayout {
    Plain { m: usize, k: usize, n: usize },
    Batched { b: usize, m: usize, k: usize, n: usize },
}

fn matmul_layout(a: &[usize], b: &[usize]) -> Result<MatMulLayout> {
    let err = || SimError::shape("matmul", a, b);
    match (a.len(), b.len()) {
        (ra, 2) if ra >= 2 => {
            let k = a[ra - 1];
            if k != b[0] {
                return Err(err());
            }
            Ok(MatMulLayout::Plain {
                m: numel(&a[..ra - 1]),
                k,
                n: b[1],
            })
        }
        (3, 3) => {
            if a[0] != b[0] || a[2] != b[1] {
                return Err(err());
            }
            Ok(MatMulLayout::Batched {
                b: a[0],
                m: a[1],
                k: a[2],
                n: b[2],
            })
        }
        _ => Err(err()),
    }
}

const PAR_ROW_BLOCK: usize = 128;

/// Row-blocked product; block boundaries do not depend on the thread count.
fn gemm_rows<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, m: usize, k: usize, n: usize, outp: &mut [T]) {
    if m < 2 * PAR_ROW_BLOCK || a.transposed || rayon::current_num_threads() == 1 {
        gemm(a, b, T::zero(), outp);
        return;
    }
    outp.par_chunks_mut(PAR_ROW_BLOCK * n)
        .enumerate()
        .for_each(|(blk, chunk)| {
            let rows = chunk.len() / n;
            let start = blk * PAR_ROW_BLOCK * k;
            let sub = MatRef::new(&a.data[start..start + rows * k], rows, k);
            gemm(sub, b, T::zero(), chunk);
        });
}

fn matmul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Forward<T>> {
    match matmul_layout(a.shape(), b.shape())? {
        MatMulLayout::Plain { m, k, n } => {
            let mut data = vec![T::zero(); m * n];
            gemm_rows(MatRef::new(a.data(), m, k), MatRef::new(b.data(), k, n), m, k, n, &mut data);
            let mut shape = a.shape()[..a.rank() - 1].to_vec();
            shape.push(n);
            out(shape, data)
        }
        MatMulLayout::Batched { b: nb, m, k, n } => {
            let mut data = vec![T::zero(); nb * m * n];
            let (ad, bd) = (a.data(), b.data());
            data.par_chunks_mut(m * n).enumerate().for_each(|(i, c)| {
                gemm(
                    MatRef::new(&ad[i * m * k..(i + 1) * m * k], m, k),
                    MatRef::new(&bd[i * k * n..(i + 1) * k * n], k, n),
                    T::zero(),
                    c,
                );
            });
            out(vec![nb, m, n], data)
        }
    }
}

fn concat_forward<T: Scalar>(inputs: &[&Tensor<T>], axis: usize) -> Result<Forward<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| SimError::invalid("concat", "no inputs"))?;
    check_axis("concat", first.shape(), axis)?;
    for x in &inputs[1..] {
        let same = x.rank() == first.rank()
            && x.shape().iter().zip(first.shape()).enumerate().all(|(i, (p, q))| i == axis || p == q);
        if !same {
            return Err(SimError::shape("concat", first.shape(), x.shape()));
        }
    }
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let total: usize = inputs.iter().map(|x| x.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for x in inputs {
            let w = x.shape()[axis] * inner;
            data.extend_from_slice(&x.data()[o * w..(o + 1) * w]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    out(shape, data)
}

fn gather_forward<T: Scalar>(x: &Tensor<T>, axis: usize, indices: &[usize]) -> Result<Forward<T>> {
    let (outer, dim, inner) = split_axis(x.shape(), axis);
    let mut data = Vec::with_capacity(outer * indices.len() * inner);
    let src = x.data();
    for o in 0..outer {
        for &i in indices {
            let s = (o * dim + i) * inner;
            data.extend_from_slice(&src[s..s + inner]);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = indices.len();
    out(shape, data)
}

fn scatter_add<T: Scalar>(g: &[T], in_shape: &[usize], axis: usize, indices: &[usize]) -> Vec<T> {
    let (outer, dim, inner) = split_axis(in_shape, axis);
    let mut dx = vec![T::zero(); numel(in_shape)];
    for o in 0..outer {
        for (t, &i) in indices.iter().enumerate() {
            let src = &g[(o * indices.len() + t) * inner..(o * indices.len() + t + 1) * inner];
            let dst = &mut dx[(o * dim + i) * inner..(o * dim + i + 1) * inner];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = *d + v;
            }
        }
    }
    dx
}

/// Computes the gradient contribution for each input flagged in `needs`.
pub(crate) fn backward<T: Scalar>(
    op: &OpKind,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    saved: &[T],
    g: &Tensor<T>,
    needs: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let gd = g.data();
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let like = |x: &Tensor<T>, data: Vec<T>| Some(Tensor::from_parts(x.shape().to_vec(), data));
    match op {
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            let os = output.shape();
            let ga = want(0).then(|| {
                let local = match op {
                    OpKind::Add | OpKind::Sub => gd.to_vec(),
                    OpKind::Mul => kernels::broadcast_binary(os, gd, b.shape(), b.data(), os, |g, y| g * y),
                    _ => kernels::broadcast_binary(os, gd, b.shape(), b.data(), os, |g, y| g / y),
                };
                Tensor::from_parts(a.shape().to_vec(), kernels::reduce_to(&local, os, a.shape()))
            });
            let gb = want(1).then(|| {
                let local = match op {
                    OpKind::Add => gd.to_vec(),
                    OpKind::Sub => gd.iter().map(|&v| -v).collect(),
                    OpKind::Mul => kernels::broadcast_binary(os, gd, a.shape(), a.data(), os, |g, x| g * x),
                    _ => {
                        // d(a/b)/db = -out / b
                        let q = kernels::broadcast_binary(os, output.data(), b.shape(), b.data(), os, |o, y| o / y);
                        gd.iter().zip(&q).map(|(&g, &q)| -g * q).collect()
                    }
                };
                Tensor::from_parts(b.shape().to_vec(), kernels::reduce_to(&local, os, b.shape()))
            });
            vec![ga, gb]
        }
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let layout = matmul_layout(a.shape(), b.shape()).expect("validated in forward");
            match layout {
                MatMulLayout::Plain { m, k, n } => {
                    let ga = want(0).then(|| {
                        let mut d = vec![T::zero(); m * k];
                        gemm_rows(MatRef::new(gd, m, n), MatRef::new(b.data(), k, n).t(), m, n, k, &mut d);
                        Tensor::from_parts(a.shape().to_vec(), d)
                    });
                    let gb = want(1).then(|| {
                        let mut d = vec![T::zero(); k * n];
                        gemm(MatRef::new(a.data(), m, k).t(), MatRef::new(gd, m, n), T::zero(), &mut d);
                        Tensor::from_parts(b.shape().to_vec(), d)
                    });
                    vec![ga, gb]
                }
                MatMulLayout::Batched { b: nb, m, k, n } => {
                    let (ad, bd) = (a.data(), b.data());
                    let ga = want(0).then(|| {
                        let mut d = vec![T::zero(); nb * m * k];
                        d.par_chunks_mut(m * k).enumerate().for_each(|(i, c)| {
                            gemm(
                                MatRef::new(&gd[i * m * n..(i + 1) * m * n], m, n),
                                MatRef::new(&bd[i * k * n..(i + 1) * k * n], k, n).t(),
                                T::zero(),
                                c,
                            )
                        });
                        Tensor::from_parts(a.shape().to_vec(), d)
                    });
                    let gb = want(1).then(|| {
                        let mut d = vec![T::zero(); nb * k * n];
                        d.par_chunks_mut(k * n).enumerate().for_each(|(i, c)| {
                            gemm(
                                MatRef::new(&ad[i * m * k..(i + 1) * m * k], m, k).t(),
                                MatRef::new(&gd[i * m * n..(i + 1) * m * n], m, n),
                                T::zero(),
                                c,
                            )
                        });
                        Tensor::from_parts(b.shape().to_vec(), d)
                    });
                    vec![ga, gb]
                }
            }
        }
        OpKind::Transpose => {
            let r = g.rank();
            let mut axes: Vec<usize> = (0..r).collect();
            axes.swap(r - 2, r - 1);
            let (_, d) = kernels::permute(gd, g.shape(), &axes);
            vec![like(inputs[0], d)]
        }
        OpKind::Permute(axes) => {
            let inv = kernels::inverse_permutation(axes);
            let (_, d) = kernels::permute(gd, g.shape(), &inv);
            vec![like(inputs[0], d)]
        }
        OpKind::Reshape(_) => vec![like(inputs[0], gd.to_vec())],
        OpKind::Concat { axis } => {
            let (outer, _, inner) = split_axis(g.shape(), *axis);
            let total = g.shape()[*axis] * inner;
            let mut offset = 0;
            inputs
                .iter()
                .enumerate()
                .map(|(idx, x)| {
                    let w = x.shape()[*axis] * inner;
                    let r = want(idx).then(|| {
                        let mut d = Vec::with_capacity(x.numel());
                        for o in 0..outer {
                            d.extend_from_slice(&gd[o * total + offset..o * total + offset + w]);
                        }
                        Tensor::from_parts(x.shape().to_vec(), d)
                    });
                    offset += w;
                    r
                })
                .collect()
        }
        OpKind::Slice { axis, start, end } => {
            let indices: Vec<usize> = (*start..*end).collect();
            vec![like(inputs[0], scatter_add(gd, inputs[0].shape(), *axis, &indices))]
        }
        OpKind::Gather { axis, indices } => {
            vec![like(inputs[0], scatter_add(gd, inputs[0].shape(), *axis, indices))]
        }
        OpKind::Sum { axis, .. } | OpKind::Mean { axis, .. } => {
            let x = inputs[0];
            let mean = matches!(op, OpKind::Mean { .. });
            let d = match axis {
                None => {
                    let mut v = gd[0];
                    if mean {
                        v = v / T::of(x.numel() as f64);
                    }
                    vec![v; x.numel()]
                }
                Some(axis) => {
                    let kept = reduced_shape(x.shape(), *axis, true);
                    let mut d = kernels::expand(gd, &kept, x.shape());
                    if mean {
                        let inv = T::one() / T::of(x.shape()[*axis] as f64);
                        d.iter_mut().for_each(|v| *v = *v * inv);
                    }
                    d
                }
            };
            vec![like(x, d)]
        }
        OpKind::BroadcastTo(_) => {
            let x = inputs[0];
            vec![like(x, kernels::reduce_to(gd, g.shape(), x.shape()))]
        }
        OpKind::Exp => vec![like(inputs[0], gd.iter().zip(output.data()).map(|(&g, &y)| g * y).collect())],
        OpKind::Log => vec![like(inputs[0], gd.iter().zip(inputs[0].data()).map(|(&g, &x)| g / x).collect())],
        OpKind::Sqrt => {
            let two = T::of(2.0);
            vec![like(inputs[0], gd.iter().zip(output.data()).map(|(&g, &y)| g / (two * y)).collect())]
        }
        OpKind::Pow(p) => {
            let (p, pm1) = (T::of(*p), T::of(*p - 1.0));
            vec![like(inputs[0], gd.iter().zip(inputs[0].data()).map(|(&g, &x)| g * p * x.powf(pm1)).collect())]
        }
        OpKind::Scale(c) => {
            let c = T::of(*c);
            vec![like(inputs[0], gd.iter().map(|&g| g * c).collect())]
        }
        OpKind::AddScalar(_) => vec![like(inputs[0], gd.to_vec())],
        OpKind::Gelu => {
            let (c, a, two, three) = (T::of(GELU_C), T::of(GELU_A), T::of(2.0), T::of(3.0));
            let s = gelu_gate(inputs[0].data());
            let d = gd
                .iter()
                .zip(inputs[0].data())
                .zip(&s)
                .map(|((&g, &x), &s)| g * (s + two * x * s * (T::one() - s) * c * (T::one() + three * a * x * x)))
                .collect();
            vec![like(inputs[0], d)]
        }
        OpKind::Softmax { axis } => {
            let (outer, dim, inner) = split_axis(output.shape(), *axis);
            let y = output.data();
            let mut d = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * dim * inner + i;
                    let mut dot = T::zero();
                    for j in 0..dim {
                        dot = dot + gd[base + j * inner] * y[base + j * inner];
                    }
                    for j in 0..dim {
                        let at = base + j * inner;
                        d[at] = y[at] * (gd[at] - dot);
                    }
                }
            }
            vec![like(inputs[0], d)]
        }
        OpKind::LayerNorm { axis, .. } => {
            let (outer, dim, inner) = split_axis(output.shape(), *axis);
            vec![like(inputs[0], standardize_backward(output.data(), gd, saved, outer, dim, inner))]
        }
        OpKind::BatchNorm(mode) => {
            let channels = *output.shape().last().unwrap_or(&1);
            let rows = output.numel() / channels;
            match mode {
                BatchNormMode::Train { .. } => {
                    let rstd = &saved[channels..];
                    vec![like(inputs[0], standardize_backward(output.data(), gd, rstd, 1, rows, channels))]
                }
                BatchNormMode::Eval { .. } => {
                    let mut d = gd.to_vec();
                    for row in d.chunks_exact_mut(channels) {
                        for (v, &r) in row.iter_mut().zip(saved) {
                            *v = *v * r;
                        }
                    }
                    vec![like(inputs[0], d)]
                }
            }
        }
        OpKind::L2Normalize { axis, eps } => {
            let (outer, dim, inner) = split_axis(output.shape(), *axis);
            let eps = T::of(*eps);
            let y = output.data();
            let mut d = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let lane = o * inner + i;
                    let base = o * dim * inner + i;
                    let norm = saved[lane];
                    if norm > eps {
                        let mut dot = T::zero();
                        for j in 0..dim {
                            dot = dot + gd[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..dim {
                            let at = base + j * inner;
                            d[at] = (gd[at] - y[at] * dot) / norm;
                        }
                    } else {
                        for j in 0..dim {
                            let at = base + j * inner;
                            d[at] = gd[at] / eps;
                        }
                    }
                }
            }
            vec![like(inputs[0], d)]
        }
    }
}
