//! One-axis sweeps over the model configuration.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{report, train_model, MetricsRecord, RunConfig};
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::model::TemprModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Strategy,
    Aggregation,
    ShareTowers,
    ShareClassifier,
    ShareLatent,
    LatentDim,
    Layers,
    TowerKind,
    ScalesN,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 9] = [
        AblationAxis::Strategy,
        AblationAxis::Aggregation,
        AblationAxis::ShareTowers,
        AblationAxis::ShareClassifier,
        AblationAxis::ShareLatent,
        AblationAxis::LatentDim,
        AblationAxis::Layers,
        AblationAxis::TowerKind,
        AblationAxis::ScalesN,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Strategy => "strategy",
            AblationAxis::Aggregation => "aggregation",
            AblationAxis::ShareTowers => "share_towers",
            AblationAxis::ShareClassifier => "share_classifier",
            AblationAxis::ShareLatent => "share_latent",
            AblationAxis::LatentDim => "latent_dim",
            AblationAxis::Layers => "layers",
            AblationAxis::TowerKind => "tower_kind",
            AblationAxis::ScalesN => "scales_n",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis '{s}'")))
    }
}

fn parse_switch(value: &str) -> Result<bool> {
    match value {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(Error::Config(format!("expected on/off, got '{value}'"))),
    }
}

fn parse_count(value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("expected a non-negative integer, got '{value}'")))
}

/// Sets `axis` to `value` in `cfg`.
pub fn apply_axis_value(axis: AblationAxis, value: &str, cfg: &mut RunConfig) -> Result<()> {
    let m = &mut cfg.model;
    match axis {
        AblationAxis::Strategy => m.strategy = value.parse()?,
        AblationAxis::Aggregation => m.agg = value.parse()?,
        AblationAxis::ShareTowers => m.tower.share_towers = parse_switch(value)?,
        AblationAxis::ShareClassifier => m.tower.share_classifier = parse_switch(value)?,
        AblationAxis::ShareLatent => m.tower.share_latent = parse_switch(value)?,
        AblationAxis::LatentDim => m.tower.latent_dim = parse_count(value)?,
        AblationAxis::Layers => m.tower.layers = parse_count(value)?,
        AblationAxis::TowerKind => m.tower.kind = value.parse()?,
        AblationAxis::ScalesN => m.scales = parse_count(value)?,
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub axis_value: String,
    pub seed: u64,
    pub param_count: usize,
    pub latent_param_bytes: usize,
    pub record: MetricsRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub axis: AblationAxis,
    pub runs: Vec<AblationRun>,
}

impl AblationResult {
    /// Mean aggregated top-1 of `value` at `rho` over seeds.
    pub fn mean_agg(&self, value: &str, rho: f64) -> Option<f64> {
        let accs: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.axis_value == value)
            .filter_map(|r| r.record.eval_at(rho).map(|e| e.agg_top1))
            .collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }

    pub fn records(&self) -> Vec<(String, MetricsRecord)> {
        self.runs.iter().map(|r| (r.axis_value.clone(), r.record.clone())).collect()
    }

    /// `results.csv`, `results.json` and a `params.csv` with model sizes.
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        report(&self.records(), out_dir)?;
        let mut w = csv::Writer::from_path(out_dir.join("params.csv"))?;
        w.write_record(["axis_value", "seed", "param_count", "latent_param_bytes"])?;
        for r in &self.runs {
            w.write_record([
                r.axis_value.clone(),
                r.seed.to_string(),
                r.param_count.to_string(),
                r.latent_param_bytes.to_string(),
            ])?;
        }
        w.flush()?;
        fs::write(out_dir.join("ablation.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Model size for `cfg` on `dataset` without training.
pub fn param_counts(cfg: &RunConfig, dataset: &Dataset) -> Result<(usize, usize)> {
    let resolved = cfg.resolve(dataset)?;
    let model = TemprModel::new(resolved.model, resolved.seed)?;
    Ok((model.param_count(), model.latent_param_count() * std::mem::size_of::<f64>()))
}

/// Trains one run per value and seed.
pub fn ablate(axis: AblationAxis, values: &[String], base: &RunConfig, dataset: &Dataset, seeds: &[u64]) -> Result<AblationResult> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one value and one seed".into()));
    }
    let mut runs = Vec::with_capacity(values.len() * seeds.len());
    for value in values {
        let mut cfg = base.clone();
        cfg.out_dir = None;
        apply_axis_value(axis, value, &mut cfg)?;
        for &seed in seeds {
            cfg.seed = seed;
            let (param_count, latent_param_bytes) = param_counts(&cfg, dataset)?;
            let (_, record) = train_model(&cfg, dataset)?;
            runs.push(AblationRun {
                axis_value: value.clone(),
                seed,
                param_count,
                latent_param_bytes,
                record,
            });
        }
    }
    Ok(AblationResult { axis, runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_names_round_trip() {
        for a in AblationAxis::ALL {
            assert_eq!(a.name().parse::<AblationAxis>().unwrap(), a);
        }
        assert!(matches!("depth".parse::<AblationAxis>(), Err(Error::Config(_))));
    }

    #[test]
    fn values_apply() {
        let mut cfg = RunConfig::default();
        apply_axis_value(AblationAxis::ShareLatent, "off", &mut cfg).unwrap();
        assert!(!cfg.model.tower.share_latent);
        apply_axis_value(AblationAxis::ScalesN, "3", &mut cfg).unwrap();
        assert_eq!(cfg.model.scales, 3);
        assert!(apply_axis_value(AblationAxis::Layers, "many", &mut cfg).is_err());
        assert!(apply_axis_value(AblationAxis::Strategy, "spiral", &mut cfg).is_err());
    }
}
