//! Parameter stores and transformer building blocks recorded on a [`Tape`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, SimError};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors of one network, in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a tape leaf; `trainable` decides whether it gets a gradient.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone(), trainable)).collect()
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.names == other.names && self.values.iter().zip(&other.values).all(|(a, b)| a.shape() == b.shape())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Running batch-norm statistics, one slot per batch-norm layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<Vec<T>>,
    pub var: Vec<Vec<T>>,
}

impl<T: Scalar> BnStats<T> {
    fn add(&mut self, channels: usize) -> usize {
        self.mean.push(vec![T::zero(); channels]);
        self.var.push(vec![T::one(); channels]);
        self.mean.len() - 1
    }

    pub fn cast<U: Scalar>(&self) -> BnStats<U> {
        let conv = |v: &Vec<Vec<T>>| v.iter().map(|r| r.iter().map(|x| U::of(x.f64())).collect()).collect();
        BnStats {
            mean: conv(&self.mean),
            var: conv(&self.var),
        }
    }
}

/// Allocates parameters with seeded initialisation.
pub struct Builder<'a, T, R> {
    pub store: &'a mut ParamStore<T>,
    pub stats: &'a mut BnStats<T>,
    pub rng: &'a mut R,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    /// Xavier-uniform `[fan_in, fan_out]` matrix.
    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| T::of(self.rng.random_range(-a..a))).collect();
        self.store.add(name, Tensor::new([fan_in, fan_out], data).expect("shape"))
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(dist.sample(self.rng))).collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape.to_vec(), T::of(value)))
    }
}

/// How batch-norm layers behave during one forward pass.
pub enum BnMode<'a, T> {
    /// Normalise with batch statistics; update running stats when given.
    Train {
        stats: Option<&'a mut BnStats<T>>,
        momentum: f64,
    },
    Eval(&'a BnStats<T>),
}

/// One forward pass of one network: its tape bindings plus mode switches.
pub struct Fwd<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub vars: &'a [Var],
    pub bn: BnMode<'a, T>,
    /// Test hook: skip every attention sub-layer so tokens are processed independently.
    pub identity_attention: bool,
}

impl<T: Scalar> Fwd<'_, T> {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: b.xavier(&format!("{name}.weight"), fan_in, fan_out),
            bias: b.constant(&format!("{name}.bias"), &[fan_out], 0.0),
            fan_in,
            fan_out,
        }
    }

    /// `x @ W + b` over the last axis.
    pub fn forward<T: Scalar>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let h = f.tape.matmul(x, f.var(self.weight))?;
        f.tape.add(h, f.var(self.bias))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Layer,
    Batch,
}

impl NormKind {
    pub fn name(self) -> &'static str {
        match self {
            NormKind::Layer => "ln",
            NormKind::Batch => "bn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ln" | "layer" | "layernorm" | "layer_norm" => Some(NormKind::Layer),
            "bn" | "batch" | "batchnorm" | "batch_norm" => Some(NormKind::Batch),
            _ => None,
        }
    }
}

pub const LN_EPS: f64 = 1e-6;
pub const BN_EPS: f64 = 1e-5;

/// Layer norm over the channel axis, or batch norm over every non-channel axis,
/// followed by a per-channel affine map.
#[derive(Clone, Debug)]
pub struct Norm {
    pub kind: NormKind,
    pub gamma: ParamId,
    pub beta: ParamId,
    /// Slot in [`BnStats`] for batch norm.
    pub slot: usize,
}

impl Norm {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, kind: NormKind, dim: usize) -> Self {
        let slot = if kind == NormKind::Batch { b.stats.add(dim) } else { usize::MAX };
        Norm {
            kind,
            gamma: b.constant(&format!("{name}.{}.weight", kind.name()), &[dim], 1.0),
            beta: b.constant(&format!("{name}.{}.bias", kind.name()), &[dim], 0.0),
            slot,
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let h = match self.kind {
            NormKind::Layer => {
                let axis = f.tape.shape(x).len() - 1;
                f.tape.layer_norm(x, axis, LN_EPS)?
            }
            NormKind::Batch => match &mut f.bn {
                BnMode::Train { stats, momentum } => {
                    let (h, mean, var) = f.tape.batch_norm_train(x, BN_EPS)?;
                    if let Some(stats) = stats {
                        let shape = f.tape.shape(x);
                        let rows = shape.iter().product::<usize>() / shape.last().copied().unwrap_or(1);
                        let unbias = T::of(rows as f64 / (rows as f64 - 1.0));
                        let m = T::of(*momentum);
                        let one = T::one();
                        for (r, &v) in stats.mean[self.slot].iter_mut().zip(&mean) {
                            *r = (one - m) * *r + m * v;
                        }
                        for (r, &v) in stats.var[self.slot].iter_mut().zip(&var) {
                            *r = (one - m) * *r + m * v * unbias;
                        }
                    }
                    h
                }
                BnMode::Eval(stats) => {
                    let (mean, var) = (&stats.mean[self.slot], &stats.var[self.slot]);
                    f.tape.batch_norm_eval(x, mean, var, BN_EPS)?
                }
            },
        };
        let h = f.tape.mul(h, f.var(self.gamma))?;
        f.tape.add(h, f.var(self.beta))
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(SimError::invalid("attention", format!("{heads} heads do not divide width {dim}")));
        }
        Ok(Attention {
            qkv: Linear::new(b, &format!("{name}.qkv"), dim, 3 * dim),
            proj: Linear::new(b, &format!("{name}.proj"), dim, dim),
            heads,
            dim,
        })
    }

    /// Multi-head self-attention over `x: [B, L, dim]`.
    pub fn forward<T: Scalar>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let shape = f.tape.shape(x).to_vec();
        let (b, l) = (shape[0], shape[1]);
        let (h, hd) = (self.heads, self.dim / self.heads);
        let qkv = self.qkv.forward(f, x)?;
        let qkv = f.tape.reshape(qkv, &[b, l, 3, h, hd])?;
        let qkv = f.tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = f.tape.reshape(qkv, &[3 * b * h, l, hd])?;
        let q = f.tape.slice(qkv, 0, 0, b * h)?;
        let k = f.tape.slice(qkv, 0, b * h, 2 * b * h)?;
        let v = f.tape.slice(qkv, 0, 2 * b * h, 3 * b * h)?;
        let kt = f.tape.transpose(k)?;
        let scores = f.tape.matmul(q, kt)?;
        let scores = f.tape.scale(scores, 1.0 / (hd as f64).sqrt())?;
        let attn = f.tape.softmax(scores, 2)?;
        let out = f.tape.matmul(attn, v)?;
        let out = f.tape.reshape(out, &[b, h, l, hd])?;
        let out = f.tape.permute(out, &[0, 2, 1, 3])?;
        let out = f.tape.reshape(out, &[b, l, self.dim])?;
        self.proj.forward(f, out)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn forward<T: Scalar>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(f, x)?;
        let h = f.tape.gelu(h)?;
        self.fc2.forward(f, h)
    }
}

/// Pre-norm transformer encoder block.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        norm: NormKind,
    ) -> Result<Self> {
        Ok(Block {
            norm1: Norm::new(b, &format!("{name}.norm1"), norm, dim),
            attn: Attention::new(b, &format!("{name}.attn"), dim, heads)?,
            norm2: Norm::new(b, &format!("{name}.norm2"), norm, dim),
            mlp: Mlp {
                fc1: Linear::new(b, &format!("{name}.mlp.fc1"), dim, dim * mlp_ratio),
                fc2: Linear::new(b, &format!("{name}.mlp.fc2"), dim * mlp_ratio, dim),
            },
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let x = if f.identity_attention {
            x
        } else {
            let h = self.norm1.forward(f, x)?;
            let h = self.attn.forward(f, h)?;
            f.tape.add(x, h)?
        };
        let h = self.norm2.forward(f, x)?;
        let h = self.mlp.forward(f, h)?;
        f.tape.add(x, h)
    }
}

pub fn blocks<T: Scalar, R: Rng>(
    b: &mut Builder<'_, T, R>,
    prefix: &str,
    depth: usize,
    dim: usize,
    heads: usize,
    mlp_ratio: usize,
    norm: NormKind,
) -> Result<Vec<Block>> {
    (0..depth)
        .map(|i| Block::new(b, &format!("{prefix}.blocks.{i}"), dim, heads, mlp_ratio, norm))
        .collect()
}
