//! Shared spatio-temporal feature encoder and adaptive average pooling.
//!
//! Volumes are channel-last (`[t, h, w, C]`), so flattening a pooled
//! volume yields the `thw × C` token matrix the towers consume directly.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{params, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Toy3d,
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("toy3d")
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy3d" => Ok(EncoderKind::Toy3d),
            _ => Err(Error::Config(format!("unknown encoder kind '{s}'"))),
        }
    }
}

/// Encoder output for one scale, pooled to the configured grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    /// `[t, h, w, C]`
    pub data: Tensor,
    pub scale_index: usize,
}

impl FeatureVolume {
    pub fn channels(&self) -> usize {
        self.data.shape[3]
    }

    pub fn grid(&self) -> [usize; 3] {
        [self.data.shape[0], self.data.shape[1], self.data.shape[2]]
    }
}

/// A feature extractor whose parameters are shared by every scale.
pub trait FeatureEncoder {
    /// Records the forward pass for one `F×H×W×C_in` volume and returns
    /// the pooled `[t,h,w,C]` features.
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var>;

    fn out_channels(&self) -> usize;

    fn grid(&self) -> [usize; 3];

    fn encode(&self, store: &ParamStore, x: &Tensor, scale_index: usize) -> Result<FeatureVolume> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let out = self.forward(&mut g, store, v)?;
        Ok(FeatureVolume {
            data: g.value(out).clone(),
            scale_index,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: [usize; 3],
    pub cin: usize,
    pub cout: usize,
}

impl Conv3dLayer {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cin: usize, cout: usize, stride: [usize; 3]) -> Self {
        Conv3dLayer {
            weight: store.add(format!("{name}.weight"), params::he(rng, 27 * cin, cout)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, cout])),
            stride,
            cin,
            cout,
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv3d(x, w, b, self.stride)
    }
}

/// Three 3×3×3 convolutions (`C_in→16→32→C`, spatial stride 2 on the first
/// two) with GELU, followed by adaptive average pooling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Toy3dEncoder {
    pub layers: [Conv3dLayer; 3],
    pub grid: [usize; 3],
}

impl Toy3dEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, in_channels: usize, channels: usize, grid: [usize; 3]) -> Result<Self> {
        if in_channels == 0 || channels == 0 || grid.contains(&0) {
            return Err(Error::Config(format!(
                "encoder needs positive widths and grid, got in={in_channels} C={channels} grid={grid:?}"
            )));
        }
        Ok(Toy3dEncoder {
            layers: [
                Conv3dLayer::new(store, rng, "encoder.conv1", in_channels, 16, [1, 2, 2]),
                Conv3dLayer::new(store, rng, "encoder.conv2", 16, 32, [1, 2, 2]),
                Conv3dLayer::new(store, rng, "encoder.conv3", 32, channels, [1, 1, 1]),
            ],
            grid,
        })
    }
}

impl FeatureEncoder for Toy3dEncoder {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = &g.value(x).shape;
        if shape.len() != 4 || shape[3] != self.layers[0].cin {
            return Err(Error::Config(format!(
                "encoder expects F×H×W×{} input, got {shape:?}",
                self.layers[0].cin
            )));
        }
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, store, h)?;
            h = g.gelu(h);
        }
        g.adaptive_avg_pool(h, self.grid)
    }

    fn out_channels(&self) -> usize {
        self.layers[2].cout
    }

    fn grid(&self) -> [usize; 3] {
        self.grid
    }
}

/// Eager adaptive average pooling of a channel-last `[t',h',w',C]` volume.
pub fn adaptive_avg_pool(x: &Tensor, target: [usize; 3]) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = g.adaptive_avg_pool(v, target)?;
    Ok(g.value(out).clone())
}
