//! Per-scale attention towers.
//!
//! A tower projects the positional-encoded scale features back to width
//! `C`, attends them from a small latent array (cross block), refines the
//! latents with a stack of self-attention blocks and hands them to a
//! linear classifier.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{params, Graph, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamId, ParamStore, Tensor, Var};

/// Hidden width multiplier of every block MLP.
pub const MLP_RATIO: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TowerKind {
    Attention,
    Mlp4,
    Mlp8,
}

impl TowerKind {
    pub fn mlp_depth(self) -> Option<usize> {
        match self {
            TowerKind::Attention => None,
            TowerKind::Mlp4 => Some(4),
            TowerKind::Mlp8 => Some(8),
        }
    }
}

impl fmt::Display for TowerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TowerKind::Attention => "attention",
            TowerKind::Mlp4 => "mlp4",
            TowerKind::Mlp8 => "mlp8",
        })
    }
}

impl FromStr for TowerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(TowerKind::Attention),
            "mlp4" => Ok(TowerKind::Mlp4),
            "mlp8" => Ok(TowerKind::Mlp8),
            _ => Err(Error::Config(format!("unknown tower kind '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerConfig {
    pub layers: usize,
    pub latent_dim: usize,
    pub heads_cross: usize,
    pub heads_self: usize,
    pub share_towers: bool,
    pub share_classifier: bool,
    pub share_latent: bool,
    pub kind: TowerKind,
    pub pe_bands: usize,
}

impl Default for TowerConfig {
    fn default() -> Self {
        TowerConfig {
            layers: 2,
            latent_dim: 64,
            heads_cross: 4,
            heads_self: 8,
            share_towers: false,
            share_classifier: true,
            share_latent: true,
            kind: TowerKind::Attention,
            pe_bands: 4,
        }
    }
}

impl TowerConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.kind == TowerKind::Attention && self.layers == 0 {
            return Err(Error::Config("attention towers need at least one self-attention block".into()));
        }
        if self.latent_dim == 0 || self.pe_bands == 0 {
            return Err(Error::Config("latent_dim and pe_bands must be positive".into()));
        }
        for (heads, what) in [(self.heads_cross, "cross"), (self.heads_self, "self")] {
            if heads == 0 || channels % heads != 0 {
                return Err(Error::Config(format!(
                    "{what}-attention heads ({heads}) must divide the feature width {channels}"
                )));
            }
        }
        Ok(())
    }
}

/// Number of PE channels appended to every token.
pub fn pe_channels(bands: usize) -> usize {
    4 * (1 + 2 * bands)
}

fn linspace_coord(i: usize, len: usize) -> f64 {
    if len <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (len - 1) as f64
    }
}

/// Fourier features for every `thw` position of scale `scale_index` (1-based) out of `n`.
///
/// Each of the four coordinates (scale, t, h, w), mapped to `[-1, 1]`,
/// contributes `[p, sin(π f_k p), cos(π f_k p)]` with `f_k = 2^k`.
pub fn fourier_pe(scale_index: usize, n: usize, grid: [usize; 3], bands: usize) -> Result<Tensor> {
    if bands == 0 || n == 0 || scale_index == 0 || scale_index > n {
        return Err(Error::Config(format!(
            "fourier_pe needs bands>=1 and 1<=i<=n, got i={scale_index} n={n} bands={bands}"
        )));
    }
    let scale = 2.0 * scale_index as f64 / n as f64 - 1.0;
    let width = pe_channels(bands);
    let positions = grid.iter().product::<usize>();
    let mut data = Vec::with_capacity(positions * width);
    for a in 0..grid[0] {
        for b in 0..grid[1] {
            for c in 0..grid[2] {
                let coords = [
                    scale,
                    linspace_coord(a, grid[0]),
                    linspace_coord(b, grid[1]),
                    linspace_coord(c, grid[2]),
                ];
                for p in coords {
                    data.push(p);
                    for k in 0..bands {
                        let f = (1u64 << k) as f64;
                        data.push((PI * f * p).sin());
                        data.push((PI * f * p).cos());
                    }
                }
            }
        }
    }
    Tensor::new(vec![positions, width], data)
}

/// Learned `d × C` latent array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentArray {
    pub param: ParamId,
    pub slots: usize,
    pub width: usize,
}

impl LatentArray {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, slots: usize, width: usize) -> Self {
        LatentArray {
            param: store.add(name, params::normal(rng, &[slots, width], 0.5)),
            slots,
            width,
        }
    }
}

/// `h = MCA(LN(u), LN(z)) + u; out = MLP(LN(h)) + h`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossMab {
    pub ln_latent: LayerNorm,
    pub ln_input: LayerNorm,
    pub attention: MultiHeadAttention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl CrossMab {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, width: usize, heads: usize) -> Result<Self> {
        Ok(CrossMab {
            ln_latent: LayerNorm::new(store, &format!("{name}.ln_latent"), width),
            ln_input: LayerNorm::new(store, &format!("{name}.ln_input"), width),
            attention: MultiHeadAttention::new(store, rng, &format!("{name}.mca"), width, heads)?,
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), width),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), width, MLP_RATIO * width),
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, latent: Var, tokens: Var) -> Result<Var> {
        if g.value(tokens).rows() == 0 {
            return Err(Error::Dimension("cross attention over zero tokens".into()));
        }
        let q = self.ln_latent.forward(g, store, latent)?;
        let kv = self.ln_input.forward(g, store, tokens)?;
        let att = self.attention.forward(g, store, q, kv)?;
        let h = g.add(att, latent)?;
        let m = self.ln_mlp.forward(g, store, h)?;
        let m = self.mlp.forward(g, store, m)?;
        g.add(m, h)
    }
}

/// `h = MSA(LN(z)) + z; out = MLP(LN(h)) + h`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelfMab {
    pub ln_attn: LayerNorm,
    pub attention: MultiHeadAttention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl SelfMab {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, width: usize, heads: usize) -> Result<Self> {
        Ok(SelfMab {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), width),
            attention: MultiHeadAttention::new(store, rng, &format!("{name}.msa"), width, heads)?,
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), width),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), width, MLP_RATIO * width),
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let n = self.ln_attn.forward(g, store, z)?;
        let att = self.attention.forward(g, store, n, n)?;
        let h = g.add(att, z)?;
        let m = self.ln_mlp.forward(g, store, h)?;
        let m = self.mlp.forward(g, store, m)?;
        g.add(m, h)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelfMabStack {
    pub blocks: Vec<SelfMab>,
}

impl SelfMabStack {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, width: usize, heads: usize, layers: usize) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("self-attention stack needs L >= 1".into()));
        }
        let blocks = (0..layers)
            .map(|j| SelfMab::new(store, rng, &format!("{name}.{j}"), width, heads))
            .collect::<Result<_>>()?;
        Ok(SelfMabStack { blocks })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z0: Var) -> Result<Var> {
        self.blocks.iter().try_fold(z0, |z, b| b.forward(g, store, z))
    }
}

/// Cross block followed by the self-attention stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionTower {
    pub cross: CrossMab,
    pub stack: SelfMabStack,
}

/// Baseline: mean-pooled tokens through residual MLP blocks, broadcast to `d` slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpTower {
    pub blocks: Vec<(LayerNorm, Mlp)>,
    pub slots: usize,
}

impl MlpTower {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, width: usize, depth: usize, slots: usize) -> Self {
        let blocks = (0..depth)
            .map(|j| {
                (
                    LayerNorm::new(store, &format!("{name}.{j}.ln"), width),
                    Mlp::new(store, rng, &format!("{name}.{j}.mlp"), width, MLP_RATIO * width),
                )
            })
            .collect();
        MlpTower { blocks, slots }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Result<Var> {
        let mut h = g.mean_rows(tokens)?;
        for (ln, mlp) in &self.blocks {
            let n = ln.forward(g, store, h)?;
            let m = mlp.forward(g, store, n)?;
            h = g.add(m, h)?;
        }
        g.repeat_rows(h, self.slots)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TowerBody {
    Attention(AttentionTower),
    Mlp(MlpTower),
}

/// One tower: input projection (`C + PE → C`) and body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tower {
    pub input_proj: Linear,
    pub body: TowerBody,
}

impl Tower {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, width: usize, cfg: &TowerConfig) -> Result<Self> {
        let input_proj = Linear::new(store, rng, &format!("{name}.input_proj"), width + pe_channels(cfg.pe_bands), width);
        let body = match cfg.kind.mlp_depth() {
            None => TowerBody::Attention(AttentionTower {
                cross: CrossMab::new(store, rng, &format!("{name}.cross"), width, cfg.heads_cross)?,
                stack: SelfMabStack::new(store, rng, &format!("{name}.self"), width, cfg.heads_self, cfg.layers)?,
            }),
            Some(depth) => TowerBody::Mlp(MlpTower::new(store, rng, &format!("{name}.mlp"), width, depth, cfg.latent_dim)),
        };
        Ok(Tower { input_proj, body })
    }

    /// Maps `thw × (C+PE)` tokens to the `d × C` tower output `ẑ_{i,L}`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: Var, latent: Option<&LatentArray>) -> Result<Var> {
        let x = self.input_proj.forward(g, store, tokens)?;
        match &self.body {
            TowerBody::Attention(t) => {
                let latent = latent.ok_or_else(|| Error::Config("attention tower needs a latent array".into()))?;
                let u = g.param(store, latent.param);
                let z0 = t.cross.forward(g, store, u, x)?;
                t.stack.forward(g, store, z0)
            }
            TowerBody::Mlp(t) => t.forward(g, store, x),
        }
    }
}

/// Mean over latent slots followed by one linear map to class scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Classifier {
    pub linear: Linear,
}

impl Classifier {
    /// Zero-initialized, so every tower starts from the uniform distribution.
    pub fn new(store: &mut ParamStore, name: &str, width: usize, classes: usize) -> Self {
        Classifier {
            linear: Linear {
                weight: store.add(format!("{name}.weight"), Tensor::zeros(&[width, classes])),
                bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, classes])),
            },
        }
    }

    /// Returns `(logits, ŷ)`, both `1 × classes`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z_hat: Var) -> Result<(Var, Var)> {
        let pooled = g.mean_rows(z_hat)?;
        let logits = self.linear.forward(g, store, pooled)?;
        let probs = g.softmax_rows(logits)?;
        Ok((logits, probs))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TowerOutput {
    pub z_hat: Tensor,
    pub logits: Vec<f64>,
    pub y_hat: Vec<f64>,
}

/// Multiply-accumulate and attention-map estimates for one tower forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TowerCost {
    pub macs: u64,
    /// Number of attention weights materialized (summed over heads and blocks).
    pub attention_entries: u64,
}

/// Cost of a cross-bottleneck tower (`d` latents attending `tokens`) with `layers` self blocks.
pub fn cross_tower_cost(tokens: usize, latents: usize, width: usize, layers: usize, heads_cross: usize, heads_self: usize) -> TowerCost {
    let (n, d, c) = (tokens as u64, latents as u64, width as u64);
    let mlp = 2 * MLP_RATIO as u64 * c * c;
    let cross = d * c * c + 2 * n * c * c + 2 * d * n * c + d * c * c + d * mlp;
    let block = 4 * d * c * c + 2 * d * d * c + d * mlp;
    TowerCost {
        macs: cross + layers as u64 * block,
        attention_entries: heads_cross as u64 * d * n + layers as u64 * heads_self as u64 * d * d,
    }
}

/// Cost of a tower made only of `layers + 1` self-attention blocks over all tokens.
pub fn self_only_tower_cost(tokens: usize, width: usize, layers: usize, heads: usize) -> TowerCost {
    let (n, c) = (tokens as u64, width as u64);
    let mlp = 2 * MLP_RATIO as u64 * c * c;
    let block = 4 * n * c * c + 2 * n * n * c + n * mlp;
    let blocks = layers as u64 + 1;
    TowerCost {
        macs: blocks * block,
        attention_entries: blocks * heads as u64 * n * n,
    }
}
