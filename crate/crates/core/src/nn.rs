//! Linear maps, normalization, MLPs and multi-head attention over the tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use spt_tensor::{Tape, Tensor, Var};

use crate::config::LayerKind;
use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};
use crate::peft::{self, LinearPeft};

/// Registers parameters under a name prefix, drawing initial values from one
/// seeded stream. Everything it creates is frozen.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: ChaCha8Rng,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: ChaCha8Rng) -> Self {
        Builder { store, rng }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = normal_tensor(&mut self.rng, shape, std);
        self.store.add(name, t, false)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, value), false)
    }

    pub fn linear(&mut self, name: &str, in_dim: usize, out_dim: usize, kind: LayerKind, bias: bool) -> Linear {
        let weight = self.normal(&format!("{name}.weight"), &[out_dim, in_dim], (1.0 / in_dim as f64).sqrt());
        let bias = bias.then(|| self.constant(&format!("{name}.bias"), &[out_dim], 0.0));
        Linear {
            name: name.to_string(),
            weight,
            bias,
            in_dim,
            out_dim,
            kind,
            peft: None,
        }
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: self.constant(&format!("{name}.gamma"), &[dim], 1.0),
            beta: self.constant(&format!("{name}.beta"), &[dim], 0.0),
        }
    }
}

pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("positive shape")
}

/// `y = x Wᵀ + b` with weight stored `[out, in]`, optionally carrying a
/// LoRA or DoRA attachment.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub kind: LayerKind,
    pub peft: Option<LinearPeft>,
}

impl Linear {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let w = p[self.weight];
        let y = match &self.peft {
            None => tape.matmul_nt(x, w)?,
            Some(LinearPeft::Lora { a, b, scaling }) => peft::lora_forward(tape, x, w, p[*a], p[*b], *scaling)?,
            Some(LinearPeft::Dora { magnitude, a, b }) => {
                let merged = peft::dora_weight(tape, w, p[*magnitude], p[*a], p[*b])?;
                tape.matmul_nt(x, merged)?
            }
        };
        match self.bias {
            Some(b) => Ok(tape.add(y, p[b])?),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.layer_norm(x, p[self.gamma], p[self.beta], 1e-6)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(match self {
            Activation::Relu => tape.relu(x)?,
            Activation::Gelu => tape.gelu(x)?,
        })
    }
}

/// Stack of linear layers with an activation between consecutive layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
}

impl Mlp {
    pub fn build(b: &mut Builder, name: &str, dims: &[usize], kind: LayerKind, act: Activation) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| b.linear(&format!("{name}.{i}"), w[0], w[1], kind, true))
            .collect();
        Mlp { layers, act }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, p, x)?;
            if i < last {
                x = self.act.apply(tape, x)?;
            }
        }
        Ok(x)
    }
}

/// Multi-head attention with an internal width that may differ from the
/// model width.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub internal: usize,
}

impl Attention {
    pub fn build(b: &mut Builder, name: &str, dim: usize, internal: usize, heads: usize) -> Self {
        Attention {
            q: b.linear(&format!("{name}.q"), dim, internal, LayerKind::Query, true),
            k: b.linear(&format!("{name}.k"), dim, internal, LayerKind::Key, true),
            v: b.linear(&format!("{name}.v"), dim, internal, LayerKind::Value, true),
            out: b.linear(&format!("{name}.out"), internal, dim, LayerKind::Output, true),
            heads,
            internal,
        }
    }

    /// Inputs are `[n, dim]` or `[batch, n, dim]`; keys and values share
    /// their token count.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, q: Var, k: Var, v: Var) -> Result<Var> {
        let q_shape = tape.shape(q).to_vec();
        let k_shape = tape.shape(k).to_vec();
        let (groups, nq) = split_leading(&q_shape);
        let (_, nk) = split_leading(&k_shape);
        let h = self.heads;
        let dh = self.internal / h;
        let q = self.q.forward(tape, p, q)?;
        let k = self.k.forward(tape, p, k)?;
        let v = self.v.forward(tape, p, v)?;
        let heads = |tape: &mut Tape, x: Var, n: usize| -> Result<Var> {
            let x = tape.reshape(x, &[groups, n, h, dh])?;
            Ok(tape.permute(x, &[0, 2, 1, 3])?)
        };
        let q = heads(tape, q, nq)?;
        let k = heads(tape, k, nk)?;
        let v = heads(tape, v, nk)?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let probs = tape.softmax(scores, 3)?;
        let o = tape.matmul(probs, v)?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        let mut out_shape = q_shape;
        *out_shape.last_mut().expect("rank >= 2") = self.internal;
        let o = tape.reshape(o, &out_shape)?;
        self.out.forward(tape, p, o)
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.out]
    }
}

fn split_leading(shape: &[usize]) -> (usize, usize) {
    let n = shape[shape.len() - 2];
    let groups = shape[..shape.len() - 2].iter().product();
    (groups, n)
}
