//! Parameterized building blocks recorded on a [`Graph`].

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{self, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// `y = x·W + b` with `W: in×out`, `b: 1×out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), params::xavier(rng, fan_in, fan_out)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, fan_out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[1, width], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[1, width])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layernorm(x, gamma, beta, LN_EPS)
    }
}

/// Two-layer GELU perceptron `width → hidden → width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp {
    pub up: Linear,
    pub down: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, width: usize, hidden: usize) -> Self {
        Mlp {
            up: Linear::new(store, rng, &format!("{name}.up"), width, hidden),
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, width),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }
}

/// Multi-head scaled dot-product attention with learned Q/K/V/output projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Attention output plus the per-head weight matrices (`Nq×Nk` each).
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "feature width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            key: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            value: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            output: Linear::new(store, rng, &format!("{name}.o"), dim, dim),
            heads,
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q_tokens: Var, kv_tokens: Var) -> Result<Var> {
        Ok(self.forward_traced(g, store, q_tokens, kv_tokens)?.output)
    }

    pub fn forward_traced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q_tokens: Var,
        kv_tokens: Var,
    ) -> Result<AttentionTrace> {
        let (nq, dq) = g.value(q_tokens).dims2()?;
        let (nk, dk) = g.value(kv_tokens).dims2()?;
        if nq == 0 || nk == 0 {
            return Err(Error::Dimension("attention needs at least one query and one key".into()));
        }
        if dq != self.dim || dk != self.dim {
            return Err(Error::Dimension(format!(
                "attention width {} but tokens are {dq} and {dk} wide",
                self.dim
            )));
        }
        let q = self.query.forward(g, store, q_tokens)?;
        let k = self.key.forward(g, store, kv_tokens)?;
        let v = self.value.forward(g, store, kv_tokens)?;
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * head_dim, head_dim)?;
            let kh = g.slice_cols(k, h * head_dim, head_dim)?;
            let vh = g.slice_cols(v, h * head_dim, head_dim)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores)?;
            weights.push(attn);
            outs.push(g.matmul(attn, vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let output = self.output.forward(g, store, merged)?;
        Ok(AttentionTrace { output, weights })
    }
}
