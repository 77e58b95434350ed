//! Full multi-scale model: shared encoder, one tower per scale and the aggregation head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::{self, AggKind, AggSettings, AggVars, BetaParam, PredictionSet};
use crate::dataio::{clip_to_ratio, VideoClip};
use crate::encoder::{EncoderKind, FeatureEncoder, Toy3dEncoder};
use crate::error::{Error, Result};
use crate::numkit::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::scales::{build_scales, gather_inputs, ScaleSet, Strategy};
use crate::tower::{fourier_pe, Classifier, LatentArray, Tower, TowerConfig, TowerKind, TowerOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub in_channels: usize,
    pub enc_kind: EncoderKind,
    pub enc_channels: usize,
    pub grid: [usize; 3],
    pub frames: usize,
    pub scales: usize,
    pub strategy: Strategy,
    pub tower: TowerConfig,
    pub agg: AggKind,
    pub gate_theta: f64,
}

impl ModelConfig {
    /// Small defaults sized for a single CPU core.
    pub fn desk(num_classes: usize, in_channels: usize) -> Self {
        ModelConfig {
            num_classes,
            in_channels,
            enc_kind: EncoderKind::Toy3d,
            enc_channels: 64,
            grid: [8, 4, 4],
            frames: 8,
            scales: 4,
            strategy: Strategy::Increasing,
            tower: TowerConfig::default(),
            agg: AggKind::Adaptive,
            gate_theta: aggregate::DEFAULT_GATE_THETA,
        }
    }

    /// Full-size settings: `L=8, d=256, F=16`, grid `16×4×4`, `C=256`.
    pub fn paper(num_classes: usize, in_channels: usize) -> Self {
        let mut cfg = Self::desk(num_classes, in_channels);
        cfg.enc_channels = 256;
        cfg.grid = [16, 4, 4];
        cfg.frames = 16;
        cfg.tower.layers = 8;
        cfg.tower.latent_dim = 256;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.scales == 0 || self.frames == 0 || self.in_channels == 0 || self.enc_channels == 0 {
            return Err(Error::Config("scales, frames and channel counts must be positive".into()));
        }
        if self.grid.contains(&0) {
            return Err(Error::Config(format!("pooled grid must be positive, got {:?}", self.grid)));
        }
        if !(self.gate_theta > 0.0 && self.gate_theta <= 1.0) {
            return Err(Error::Config(format!("gate theta must be in (0,1], got {}", self.gate_theta)));
        }
        self.tower.validate(self.enc_channels)
    }

    pub fn tokens(&self) -> usize {
        self.grid.iter().product()
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct SampleForward {
    pub logits: Vec<Var>,
    pub y_hats: Vec<Var>,
    /// `n × K` stacked tower predictions.
    pub stacked: Var,
    /// `1 × K` renormalized aggregate.
    pub aggregated: Var,
}

#[derive(Debug, Clone)]
pub struct TemprModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Toy3dEncoder,
    /// One entry per scale; shared components repeat the same parameter ids.
    pub towers: Vec<Tower>,
    pub latents: Vec<LatentArray>,
    pub classifiers: Vec<Classifier>,
    /// `1×1` raw β.
    pub beta: ParamId,
    /// `n×1` tower logits for the `weighted` variants.
    pub tower_logits: Option<ParamId>,
    pe: Vec<Tensor>,
}

impl TemprModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.enc_channels;
        let n = config.scales;
        let encoder = Toy3dEncoder::new(&mut store, &mut rng, config.in_channels, c, config.grid)?;

        let towers = if config.tower.share_towers {
            vec![Tower::new(&mut store, &mut rng, "tower", c, &config.tower)?; n]
        } else {
            (0..n)
                .map(|i| Tower::new(&mut store, &mut rng, &format!("tower{i}"), c, &config.tower))
                .collect::<Result<_>>()?
        };
        let d = config.tower.latent_dim;
        let latents = match config.tower.kind {
            TowerKind::Attention if config.tower.share_latent => {
                vec![LatentArray::new(&mut store, &mut rng, "latent", d, c); n]
            }
            TowerKind::Attention => (0..n)
                .map(|i| LatentArray::new(&mut store, &mut rng, &format!("latent{i}"), d, c))
                .collect(),
            _ => Vec::new(),
        };
        let k = config.num_classes;
        let classifiers = if config.tower.share_classifier {
            vec![Classifier::new(&mut store, "classifier", c, k); n]
        } else {
            (0..n)
                .map(|i| Classifier::new(&mut store, &format!("classifier{i}"), c, k))
                .collect()
        };
        let beta = store.add("beta", Tensor::zeros(&[1, 1]));
        let tower_logits = config
            .agg
            .has_tower_weights()
            .then(|| store.add("tower_logits", Tensor::zeros(&[n, 1])));
        let pe = (1..=n)
            .map(|i| fourier_pe(i, n, config.grid, config.tower.pe_bands))
            .collect::<Result<_>>()?;
        Ok(TemprModel {
            config,
            store,
            encoder,
            towers,
            latents,
            classifiers,
            beta,
            tower_logits,
            pe,
        })
    }

    /// Rebuilds the structure for `config` and loads saved parameter values.
    pub fn from_values(config: ModelConfig, values: Vec<Vec<f64>>) -> Result<Self> {
        let mut model = TemprModel::new(config, 0)?;
        model.store.load_values(values)?;
        Ok(model)
    }

    pub fn num_scales(&self) -> usize {
        self.config.scales
    }

    pub fn beta_param(&self) -> BetaParam {
        BetaParam::new(self.store.get(self.beta).data[0])
    }

    pub fn agg_settings(&self) -> AggSettings {
        AggSettings {
            kind: self.config.agg,
            beta: self.beta_param(),
            gate_theta: self.config.gate_theta,
            tower_logits: self
                .tower_logits
                .map(|id| self.store.get(id).data.clone())
                .unwrap_or_default(),
        }
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    fn unique_numel(&self, ids: impl Iterator<Item = ParamId>) -> usize {
        let mut ids: Vec<ParamId> = ids.collect();
        ids.sort_unstable_by_key(|id| id.0);
        ids.dedup();
        ids.iter().map(|&id| self.store.get(id).numel()).sum()
    }

    /// Scalars held by distinct latent arrays.
    pub fn latent_param_count(&self) -> usize {
        self.unique_numel(self.latents.iter().map(|l| l.param))
    }

    /// Scalars held by distinct classifiers.
    pub fn classifier_param_count(&self) -> usize {
        self.unique_numel(self.classifiers.iter().flat_map(|c| [c.linear.weight, c.linear.bias]))
    }

    /// Samples scales for `clip` observed at `rho` and gathers their frame volumes.
    pub fn prepare_inputs(&self, clip: &VideoClip, rho: f64, rng: &mut impl Rng) -> Result<(ScaleSet, Vec<Tensor>)> {
        if clip.dims.channels != self.config.in_channels {
            return Err(Error::Config(format!(
                "clip has {} channels, model expects {}",
                clip.dims.channels, self.config.in_channels
            )));
        }
        let prefix = clip_to_ratio(clip, rho)?;
        let mut scales = build_scales(prefix.t_rho, self.config.scales, self.config.strategy, rng)?;
        scales.sample(self.config.frames, rng)?;
        let inputs = gather_inputs(&prefix, &scales)?;
        Ok((scales, inputs))
    }

    fn tower_forward(&self, g: &mut Graph, i: usize, input: &Tensor) -> Result<(Var, Var, Var)> {
        let x = g.constant(input.clone());
        let feats = self.encoder.forward(g, &self.store, x)?;
        let c = self.encoder.out_channels();
        let feats = g.reshape(feats, &[self.config.tokens(), c])?;
        let pe = g.constant(self.pe[i].clone());
        let tokens = g.concat_cols(&[feats, pe])?;
        let z = self.towers[i].forward(g, &self.store, tokens, self.latents.get(i))?;
        let (logits, probs) = self.classifiers[i].forward(g, &self.store, z)?;
        Ok((z, logits, probs))
    }

    /// Records the forward pass for one sample's `n` scale volumes.
    pub fn forward(&self, g: &mut Graph, inputs: &[Tensor], training: bool) -> Result<SampleForward> {
        if inputs.len() != self.config.scales {
            return Err(Error::Dimension(format!(
                "model has {} towers, got {} scale inputs",
                self.config.scales,
                inputs.len()
            )));
        }
        let mut logits = Vec::with_capacity(inputs.len());
        let mut y_hats = Vec::with_capacity(inputs.len());
        for (i, x) in inputs.iter().enumerate() {
            let (_, l, p) = self.tower_forward(g, i, x)?;
            logits.push(l);
            y_hats.push(p);
        }
        let stacked = g.concat_rows(&y_hats)?;
        let vars = AggVars {
            beta_raw: Some(g.param(&self.store, self.beta)),
            tower_logits: self.tower_logits.map(|id| g.param(&self.store, id)),
        };
        let aggregated = aggregate::graph_aggregate(g, stacked, &self.agg_settings(), &vars, training)?;
        Ok(SampleForward {
            logits,
            y_hats,
            stacked,
            aggregated,
        })
    }

    /// Records forward and cross-entropy loss of the aggregate for `label`.
    pub fn loss(&self, g: &mut Graph, inputs: &[Tensor], label: usize) -> Result<(Var, SampleForward)> {
        if label >= self.config.num_classes {
            return Err(Error::Dimension(format!(
                "label {label} outside {} classes",
                self.config.num_classes
            )));
        }
        let out = self.forward(g, inputs, true)?;
        let loss = aggregate::graph_nll(g, out.aggregated, label)?;
        Ok((loss, out))
    }

    /// Forward-only output of tower `i` (with scale code `i`) on one volume.
    pub fn tower_output(&self, i: usize, input: &Tensor) -> Result<TowerOutput> {
        if i >= self.config.scales {
            return Err(Error::Dimension(format!("tower {i} of {}", self.config.scales)));
        }
        let mut g = Graph::inference();
        let (z, l, p) = self.tower_forward(&mut g, i, input)?;
        Ok(TowerOutput {
            z_hat: g.value(z).clone(),
            logits: g.value(l).data.clone(),
            y_hat: g.value(p).data.clone(),
        })
    }

    /// Forward-only per-tower outputs.
    pub fn tower_outputs(&self, inputs: &[Tensor]) -> Result<Vec<TowerOutput>> {
        inputs.iter().enumerate().map(|(i, x)| self.tower_output(i, x)).collect()
    }

    /// Forward-only prediction with the evaluation-time aggregation.
    pub fn predict(&self, inputs: &[Tensor]) -> Result<PredictionSet> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, inputs, false)?;
        let y_hats = out.y_hats.iter().map(|&v| g.value(v).data.clone()).collect();
        PredictionSet::new(y_hats, &self.agg_settings())
    }
}
