//! Training, evaluation, ablation sweeps and result persistence.

mod ablate;
mod checkpoint;
mod report;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::eap_label;
use crate::dataio::{Dataset, Split};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::model::{ModelConfig, TemprModel};
use crate::numkit::{lr_schedule, scaled_drop_epochs, AdamW, Grads, Graph, Tensor};

pub use ablate::{ablate, apply_axis_value, param_counts, AblationAxis, AblationResult, AblationRun};
pub use checkpoint::{decode as decode_checkpoint, encode as encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use report::{emit_csv, header, ReportJson};
pub use report::{append_csv, parse_csv, records_to_rows, report, write_csv, ReportRow, RunSummary};

/// Drop epochs of the 60-epoch reference schedule.
pub const REFERENCE_DROPS: [usize; 3] = [14, 32, 44];
pub const REFERENCE_EPOCHS: usize = 60;
pub const LR_DROP_FACTOR: f64 = 0.1;

/// The observation-ratio grid `0.1, 0.2, …, 0.9`.
pub fn rho_grid() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

/// How the observation ratio of each training sample is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainRho {
    /// Uniformly from the configured ρ list.
    Grid,
    Fixed(f64),
}

impl fmt::Display for TrainRho {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainRho::Grid => f.write_str("grid"),
            TrainRho::Fixed(v) => write!(f, "fixed:{v}"),
        }
    }
}

impl FromStr for TrainRho {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "grid" {
            return Ok(TrainRho::Grid);
        }
        s.strip_prefix("fixed:")
            .and_then(|v| v.parse::<f64>().ok())
            .map(TrainRho::Fixed)
            .ok_or_else(|| Error::Config(format!("train-rho must be 'grid' or 'fixed:<v>', got '{s}'")))
    }
}

/// Which clips a run trains or evaluates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSel {
    Train,
    Val,
    All,
}

impl SplitSel {
    pub fn indices(self, dataset: &Dataset) -> Vec<usize> {
        match self {
            SplitSel::Train => dataset.split_indices(Split::Train),
            SplitSel::Val => dataset.split_indices(Split::Val),
            SplitSel::All => (0..dataset.clips.len()).collect(),
        }
    }
}

impl FromStr for SplitSel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitSel::Train),
            "val" => Ok(SplitSel::Val),
            "all" => Ok(SplitSel::All),
            _ => Err(Error::Config(format!("split must be train, val or all, got '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub rhos: Vec<f64>,
    pub train_rho: TrainRho,
    /// `num_classes` and `in_channels` are overwritten from the dataset.
    pub model: ModelConfig,
    pub epochs: usize,
    pub base_lr: f64,
    pub beta_lr: f64,
    pub weight_decay: f64,
    /// Drop epochs for a run of `REFERENCE_EPOCHS`; rescaled to `epochs`.
    pub drop_epochs: Vec<usize>,
    pub seed: u64,
    pub batch_size: usize,
    pub train_split: SplitSel,
    pub eval_split: SplitSel,
    /// Stop once an epoch's running train accuracy reaches this value.
    pub stop_at_train_acc: Option<f64>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            rhos: rho_grid(),
            train_rho: TrainRho::Grid,
            model: ModelConfig::desk(2, 1),
            epochs: 60,
            base_lr: 1e-2,
            beta_lr: 1e-3,
            weight_decay: 1e-5,
            drop_epochs: REFERENCE_DROPS.to_vec(),
            seed: 0,
            batch_size: 8,
            train_split: SplitSel::Train,
            eval_split: SplitSel::Val,
            stop_at_train_acc: None,
            out_dir: None,
        }
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("observation ratio {rho} outside (0,1)")))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rhos.is_empty() {
            return Err(Error::Config("at least one observation ratio is required".into()));
        }
        self.rhos.iter().try_for_each(|&r| check_rho(r))?;
        if let TrainRho::Fixed(r) = self.train_rho {
            check_rho(r)?;
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.base_lr > 0.0 && self.beta_lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rates must be positive and weight decay non-negative".into()));
        }
        self.model.validate()
    }

    fn resolve(&self, dataset: &Dataset) -> Result<RunConfig> {
        let mut cfg = self.clone();
        cfg.model.num_classes = dataset.num_classes();
        cfg.model.in_channels = dataset.dims().channels;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    /// β at the end of the epoch.
    pub beta: f64,
    pub lr: f64,
    pub beta_lr: f64,
}

/// Accuracy at one observation ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoResult {
    pub rho: f64,
    pub agg_top1: f64,
    pub tower_top1: Vec<f64>,
    pub clips: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub config: RunConfig,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    /// β before training followed by its value after every epoch.
    pub beta_trajectory: Vec<f64>,
    pub evals: Vec<RhoResult>,
    pub param_count: usize,
    pub latent_param_count: usize,
    pub wall_clock_secs: f64,
}

impl MetricsRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &MetricsRecord) -> bool {
        let mut a = self.clone();
        a.wall_clock_secs = other.wall_clock_secs;
        a == *other
    }

    pub fn final_train_acc(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.train_acc)
    }

    pub fn eval_at(&self, rho: f64) -> Option<&RhoResult> {
        self.evals.iter().find(|r| (r.rho - rho).abs() < 1e-12)
    }
}

/// Result of one sample's forward and backward pass.
#[derive(Debug, Clone)]
pub struct SampleGrad {
    pub grads: Grads,
    pub loss: f64,
    pub correct: bool,
}

/// Prepared inputs for one training sample.
#[derive(Debug, Clone)]
pub struct Sample {
    pub inputs: Vec<Tensor>,
    pub label: usize,
}

pub fn sample_gradient(model: &TemprModel, sample: &Sample) -> Result<SampleGrad> {
    let mut g = Graph::new();
    let (loss, out) = model.loss(&mut g, &sample.inputs, sample.label)?;
    let loss_value = g.value(loss).data[0];
    if !loss_value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss_value}")));
    }
    let correct = eap_label(&g.value(out.aggregated).data) == sample.label;
    g.backward(loss)?;
    let mut grads = Grads::zeros_like(&model.store);
    g.accumulate_param_grads(&mut grads);
    Ok(SampleGrad {
        grads,
        loss: loss_value,
        correct,
    })
}

/// Mean gradient over `samples`, reduced in input order.
pub fn batch_gradients(model: &TemprModel, samples: &[Sample], mode: ExecMode) -> Result<(Grads, Vec<SampleGrad>)> {
    let results: Vec<SampleGrad> = exec::map_with(mode, samples, |s| sample_gradient(model, s))
        .into_iter()
        .collect::<Result<_>>()?;
    let mut total = Grads::zeros_like(&model.store);
    for r in &results {
        total.add_assign(&r.grads);
    }
    total.scale(1.0 / samples.len() as f64);
    Ok((total, results))
}

fn param_norms(model: &TemprModel) -> String {
    let mut norms: Vec<(f64, &str)> = model
        .store
        .ids()
        .map(|id| (model.store.get(id).l2_norm(), model.store.name(id)))
        .collect();
    norms.sort_by(|a, b| b.0.total_cmp(&a.0));
    norms
        .iter()
        .take(5)
        .map(|(n, name)| format!("{name}={n:.4e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

struct Optimizers {
    model: AdamW,
    beta: AdamW,
}

impl Optimizers {
    fn step(&mut self, model: &mut TemprModel, grads: &Grads) -> Result<()> {
        let beta_index = model.beta.0;
        let mut model_params = Vec::new();
        let mut model_grads = Vec::new();
        let mut beta_param = Vec::new();
        for (i, t) in model.store.tensors_mut().iter_mut().enumerate() {
            if i == beta_index {
                beta_param.push(t);
            } else {
                model_params.push(t);
                model_grads.push(grads.values[i].as_slice());
            }
        }
        self.model.step(&mut model_params, &model_grads)?;
        self.beta.step(&mut beta_param, &[grads.values[beta_index].as_slice()])
    }
}

/// Deterministic stream seed for one evaluation draw.
fn eval_seed(seed: u64, clip: usize, rho_index: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [clip as u64, rho_index as u64] {
        h = (h ^ v).wrapping_mul(0x0100_0000_01b3).rotate_left(29) ^ 0xbf58_476d_1ce4_e5b9;
    }
    h
}

/// Trains a model on `dataset` and evaluates it on the configured split.
pub fn train_model(config: &RunConfig, dataset: &Dataset) -> Result<(TemprModel, MetricsRecord)> {
    train_model_with(config, dataset, &mut |_| {})
}

/// [`train_model`] with a callback after every epoch.
pub fn train_model_with(
    config: &RunConfig,
    dataset: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<(TemprModel, MetricsRecord)> {
    let started = Instant::now();
    let cfg = config.resolve(dataset)?;
    let train_idx = cfg.train_split.indices(dataset);
    if train_idx.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let mut model = TemprModel::new(cfg.model.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = Optimizers {
        model: AdamW::new(cfg.base_lr, cfg.weight_decay),
        beta: AdamW::new(cfg.beta_lr, cfg.weight_decay),
    };
    let drops = scaled_drop_epochs(&cfg.drop_epochs, REFERENCE_EPOCHS, cfg.epochs);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut beta_trajectory = vec![model.beta_param().beta()];
    let mut order = train_idx.clone();
    let mut batch_counter = 0usize;

    for epoch in 0..cfg.epochs {
        opt.model.lr = lr_schedule(epoch, cfg.base_lr, &drops, LR_DROP_FACTOR);
        opt.beta.lr = lr_schedule(epoch, cfg.beta_lr, &drops, LR_DROP_FACTOR);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let samples = batch
                .iter()
                .map(|&i| {
                    let clip = &dataset.clips[i];
                    let rho = match cfg.train_rho {
                        TrainRho::Fixed(r) => r,
                        TrainRho::Grid => cfg.rhos[rng.random_range(0..cfg.rhos.len())],
                    };
                    let (_, inputs) = model.prepare_inputs(clip, rho, &mut rng)?;
                    Ok(Sample {
                        inputs,
                        label: clip.label,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let (grads, results) = batch_gradients(&model, &samples, ExecMode::default()).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!(
                    "{msg} (epoch {epoch}, batch {batch_counter}; largest parameter norms: {})",
                    param_norms(&model)
                )),
                other => other,
            })?;
            opt.step(&mut model, &grads).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("{msg} (epoch {epoch}, batch {batch_counter})")),
                other => other,
            })?;
            loss_sum += results.iter().map(|r| r.loss).sum::<f64>();
            correct += results.iter().filter(|r| r.correct).count();
            batch_counter += 1;
        }
        let beta = model.beta_param().beta();
        beta_trajectory.push(beta);
        let train_acc = correct as f64 / order.len() as f64;
        epochs.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            train_acc,
            beta,
            lr: opt.model.lr,
            beta_lr: opt.beta.lr,
        });
        on_epoch(epochs.last().expect("just pushed"));
        if cfg.stop_at_train_acc.is_some_and(|target| train_acc >= target) {
            break;
        }
    }

    let eval_idx = cfg.eval_split.indices(dataset);
    let evals = if eval_idx.is_empty() {
        Vec::new()
    } else {
        evaluate(&model, dataset, &eval_idx, &cfg.rhos, cfg.seed)?
    };
    let record = MetricsRecord {
        seed: cfg.seed,
        epochs,
        beta_trajectory,
        evals,
        param_count: model.param_count(),
        latent_param_count: model.latent_param_count(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        config: cfg,
    };
    Ok((model, record))
}

/// Trains, then writes the checkpoint, metrics JSON and results CSV when an
/// output directory is configured.
pub fn train(config: &RunConfig, dataset: &Dataset, on_epoch: &mut dyn FnMut(&EpochMetrics)) -> Result<MetricsRecord> {
    let (model, record) = train_model_with(config, dataset, on_epoch)?;
    if let Some(dir) = &config.out_dir {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(&model, &dir.join("checkpoint.bin"))?;
        std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&record)?)?;
        write_csv(&dir.join("results.csv"), &records_to_rows(&[("run".to_string(), record.clone())]))?;
    }
    Ok(record)
}

/// Aggregated and per-tower top-1 for each ρ over the clips in `indices`.
pub fn evaluate(model: &TemprModel, dataset: &Dataset, indices: &[usize], rhos: &[f64], seed: u64) -> Result<Vec<RhoResult>> {
    if dataset.num_classes() != model.config.num_classes {
        return Err(Error::Config(format!(
            "checkpoint predicts {} classes, dataset has {}",
            model.config.num_classes,
            dataset.num_classes()
        )));
    }
    if indices.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    rhos.iter().try_for_each(|&r| check_rho(r))?;
    let n = model.num_scales();
    rhos.iter()
        .enumerate()
        .map(|(ri, &rho)| {
            let outcomes = exec::map(indices, |&i| -> Result<(bool, Vec<bool>)> {
                let clip = &dataset.clips[i];
                let mut rng = ChaCha8Rng::seed_from_u64(eval_seed(seed, i, ri));
                let (_, inputs) = model.prepare_inputs(clip, rho, &mut rng)?;
                let p = model.predict(&inputs)?;
                let towers = p.tower_labels().iter().map(|&l| l == clip.label).collect();
                Ok((p.label() == clip.label, towers))
            });
            let mut agg = 0usize;
            let mut towers = vec![0usize; n];
            for o in outcomes {
                let (a, t) = o?;
                agg += a as usize;
                for (count, hit) in towers.iter_mut().zip(t) {
                    *count += hit as usize;
                }
            }
            let total = indices.len() as f64;
            Ok(RhoResult {
                rho,
                agg_top1: agg as f64 / total,
                tower_top1: towers.iter().map(|&c| c as f64 / total).collect(),
                clips: indices.len(),
            })
        })
        .collect()
}
