//! Aggregation of per-tower class distributions.
//!
//! Every function takes the tower outputs as post-softmax probability
//! vectors. The pure versions serve evaluation and testing; the graph
//! versions record the same arithmetic for training.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{kernels, Graph, Tensor, Var};

/// Upper bound applied to `1/DSC` when the coefficient vanishes.
pub const INVERSE_CLAMP: f64 = 1e6;
/// Temperature of the relaxed `top` selection used while training.
pub const TOP_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_GATE_THETA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggKind {
    Adaptive,
    Avg,
    Softmax,
    Top,
    Gate,
    Icw,
    Eicw,
    Em,
    Weighted,
    WeightedTheta,
}

impl AggKind {
    pub const ALL: [AggKind; 10] = [
        AggKind::Adaptive,
        AggKind::Avg,
        AggKind::Softmax,
        AggKind::Top,
        AggKind::Gate,
        AggKind::Icw,
        AggKind::Eicw,
        AggKind::Em,
        AggKind::Weighted,
        AggKind::WeightedTheta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggKind::Adaptive => "adaptive",
            AggKind::Avg => "avg",
            AggKind::Softmax => "softmax",
            AggKind::Top => "top",
            AggKind::Gate => "gate",
            AggKind::Icw => "icw",
            AggKind::Eicw => "eicw",
            AggKind::Em => "em",
            AggKind::Weighted => "weighted",
            AggKind::WeightedTheta => "weighted_theta",
        }
    }

    /// Whether the variant owns learnable per-tower logits.
    pub fn has_tower_weights(self) -> bool {
        matches!(self, AggKind::Weighted | AggKind::WeightedTheta)
    }
}

impl fmt::Display for AggKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AggKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown aggregation '{s}'")))
    }
}

/// Unconstrained scalar whose sigmoid is the blend weight `β`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BetaParam {
    pub raw: f64,
}

impl BetaParam {
    pub fn new(raw: f64) -> Self {
        BetaParam { raw }
    }

    pub fn beta(&self) -> f64 {
        kernels::sigmoid(self.raw)
    }
}

fn check_predictions(y_hats: &[Vec<f64>]) -> Result<usize> {
    let k = y_hats
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Domain("aggregation needs at least one prediction".into()))?;
    if k == 0 || y_hats.iter().any(|y| y.len() != k) {
        return Err(Error::Dimension("predictions must share a positive class count".into()));
    }
    Ok(k)
}

/// Dice-Sørensen coefficient `2Σab / (Σa² + Σb²)`.
pub fn dsc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("dsc of lengths {} and {}", a.len(), b.len())));
    }
    let num: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let den: f64 = a.iter().map(|x| x * x).sum::<f64>() + b.iter().map(|y| y * y).sum::<f64>();
    if den == 0.0 {
        return Err(Error::Domain("dsc of two zero vectors".into()));
    }
    Ok(2.0 * num / den)
}

pub fn mean_prediction(y_hats: &[Vec<f64>]) -> Result<Vec<f64>> {
    let k = check_predictions(y_hats)?;
    let n = y_hats.len() as f64;
    Ok((0..k).map(|c| y_hats.iter().map(|y| y[c]).sum::<f64>() / n).collect())
}

fn softmax(values: &[f64]) -> Vec<f64> {
    kernels::softmax_rows(values, values.len())
}

fn weighted_sum(y_hats: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let k = y_hats[0].len();
    (0..k).map(|c| y_hats.iter().zip(weights).map(|(y, w)| w * y[c]).sum()).collect()
}

fn inverse_dsc(y_hats: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mean = mean_prediction(y_hats)?;
    y_hats
        .iter()
        .map(|y| {
            let d = dsc(y, &mean)?;
            Ok(if d > 0.0 { (1.0 / d).min(INVERSE_CLAMP) } else { INVERSE_CLAMP })
        })
        .collect()
}

/// Per-tower weights with the summed weighted prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerWeighting {
    pub weights: Vec<f64>,
    pub aggregate: Vec<f64>,
}

/// Per-class weights (`n × K`, columns sum to one) with the summed contribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeighting {
    pub weights: Vec<Vec<f64>>,
    pub aggregate: Vec<f64>,
}

/// Towers weighted by a softmax of their inverse agreement with the mean.
pub fn eicw(y_hats: &[Vec<f64>]) -> Result<TowerWeighting> {
    let weights = softmax(&inverse_dsc(y_hats)?);
    let aggregate = weighted_sum(y_hats, &weights);
    Ok(TowerWeighting { weights, aggregate })
}

/// Towers weighted per class by a softmax of their probabilities across towers.
pub fn em(y_hats: &[Vec<f64>]) -> Result<ClassWeighting> {
    let k = check_predictions(y_hats)?;
    let n = y_hats.len();
    let mut weights = vec![vec![0.0; k]; n];
    let mut aggregate = vec![0.0; k];
    for c in 0..k {
        let column: Vec<f64> = y_hats.iter().map(|y| y[c]).collect();
        let w = softmax(&column);
        for i in 0..n {
            weights[i][c] = w[i];
            aggregate[c] += w[i] * y_hats[i][c];
        }
    }
    Ok(ClassWeighting { weights, aggregate })
}

pub fn renormalize(v: &[f64]) -> Result<Vec<f64>> {
    let s: f64 = v.iter().sum();
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Numeric(format!("cannot renormalize a vector summing to {s}")));
    }
    Ok(v.iter().map(|x| x / s).collect())
}

/// `β·eICW + (1−β)·eM`, renormalized.
pub fn adaptive(y_hats: &[Vec<f64>], beta: BetaParam) -> Result<Vec<f64>> {
    let b = beta.beta();
    let a = eicw(y_hats)?.aggregate;
    let m = em(y_hats)?.aggregate;
    renormalize(&a.iter().zip(&m).map(|(x, y)| b * x + (1.0 - b) * y).collect::<Vec<_>>())
}

/// Everything the aggregation produced for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub y_hats: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub weights_eicw: Vec<f64>,
    pub weights_em: Vec<Vec<f64>>,
    pub aggregated: Vec<f64>,
}

impl PredictionSet {
    pub fn new(y_hats: Vec<Vec<f64>>, settings: &AggSettings) -> Result<Self> {
        let mean = mean_prediction(&y_hats)?;
        let weights_eicw = eicw(&y_hats)?.weights;
        let weights_em = em(&y_hats)?.weights;
        let aggregated = aggregate(&y_hats, settings, false)?;
        Ok(PredictionSet {
            y_hats,
            mean,
            weights_eicw,
            weights_em,
            aggregated,
        })
    }

    pub fn label(&self) -> usize {
        eap_label(&self.aggregated)
    }

    pub fn tower_labels(&self) -> Vec<usize> {
        self.y_hats.iter().map(|y| eap_label(y)).collect()
    }
}

/// Aggregation choice plus the values its learnable or tunable parts hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggSettings {
    pub kind: AggKind,
    pub beta: BetaParam,
    pub gate_theta: f64,
    /// Per-tower logits of the `weighted` variants; empty means uniform.
    pub tower_logits: Vec<f64>,
}

impl AggSettings {
    pub fn new(kind: AggKind) -> Self {
        AggSettings {
            kind,
            beta: BetaParam::default(),
            gate_theta: DEFAULT_GATE_THETA,
            tower_logits: Vec::new(),
        }
    }
}

/// Blend floor of `weighted_theta`: `1/(2n)`.
pub fn theta_floor(n: usize) -> f64 {
    1.0 / (2.0 * n as f64)
}

fn tower_softmax(logits: &[f64], n: usize) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Ok(vec![1.0 / n as f64; n]);
    }
    if logits.len() != n {
        return Err(Error::Dimension(format!("{} tower logits for {n} towers", logits.len())));
    }
    Ok(softmax(logits))
}

fn max_prob(y: &[f64]) -> f64 {
    y.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn gate_mask(y_hats: &[Vec<f64>], theta: f64) -> Vec<f64> {
    let mask: Vec<f64> = y_hats.iter().map(|y| if max_prob(y) >= theta { 1.0 } else { 0.0 }).collect();
    let count: f64 = mask.iter().sum();
    if count == 0.0 {
        vec![1.0 / y_hats.len() as f64; y_hats.len()]
    } else {
        mask.iter().map(|m| m / count).collect()
    }
}

fn top_index(y_hats: &[Vec<f64>]) -> usize {
    let mut best = 0;
    for (i, y) in y_hats.iter().enumerate().skip(1) {
        if max_prob(y) > max_prob(&y_hats[best]) {
            best = i;
        }
    }
    best
}

/// Aggregates `y_hats` with `settings`; `training` selects the relaxed `top`.
pub fn aggregate(y_hats: &[Vec<f64>], settings: &AggSettings, training: bool) -> Result<Vec<f64>> {
    check_predictions(y_hats)?;
    let n = y_hats.len();
    let raw = match settings.kind {
        AggKind::Adaptive => return adaptive(y_hats, settings.beta),
        AggKind::Avg => mean_prediction(y_hats)?,
        AggKind::Softmax | AggKind::Em => em(y_hats)?.aggregate,
        AggKind::Eicw => eicw(y_hats)?.aggregate,
        AggKind::Icw => {
            let inv = inverse_dsc(y_hats)?;
            let s: f64 = inv.iter().sum();
            weighted_sum(y_hats, &inv.iter().map(|v| v / s).collect::<Vec<_>>())
        }
        AggKind::Top if training => {
            let scores: Vec<f64> = y_hats.iter().map(|y| max_prob(y) / TOP_TEMPERATURE).collect();
            weighted_sum(y_hats, &softmax(&scores))
        }
        AggKind::Top => y_hats[top_index(y_hats)].clone(),
        AggKind::Gate => weighted_sum(y_hats, &gate_mask(y_hats, settings.gate_theta)),
        AggKind::Weighted => weighted_sum(y_hats, &tower_softmax(&settings.tower_logits, n)?),
        AggKind::WeightedTheta => {
            let theta = theta_floor(n);
            let w: Vec<f64> = tower_softmax(&settings.tower_logits, n)?
                .iter()
                .map(|s| theta + (1.0 - n as f64 * theta) * s)
                .collect();
            weighted_sum(y_hats, &w)
        }
    };
    renormalize(&raw)
}

/// Table-style variant lookup by name. `gate` needs `theta`.
pub fn variant(name: &str, y_hats: &[Vec<f64>], theta: Option<f64>) -> Result<Vec<f64>> {
    let kind: AggKind = name.parse()?;
    let mut settings = AggSettings::new(kind);
    if kind == AggKind::Gate {
        settings.gate_theta = theta.ok_or_else(|| Error::Config("gate aggregation needs theta".into()))?;
    }
    aggregate(y_hats, &settings, false)
}

/// Smallest index attaining the maximum.
pub fn eap_label(aggregated: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in aggregated.iter().enumerate() {
        if v > aggregated[best] {
            best = i;
        }
    }
    best
}

/// Graph handles for the learnable parts of an aggregation.
#[derive(Debug, Clone, Copy, Default)]
pub struct AggVars {
    /// `1×1` raw β.
    pub beta_raw: Option<Var>,
    /// `n×1` per-tower logits.
    pub tower_logits: Option<Var>,
}

fn weighted_rows(g: &mut Graph, y: Var, weights: Var) -> Result<Var> {
    let prod = g.mul(y, weights)?;
    g.sum_rows(prod)
}

fn graph_inverse_dsc(g: &mut Graph, y: Var) -> Result<Var> {
    let mean = g.mean_rows(y)?;
    let cross = g.mul(y, mean)?;
    let num = g.sum_cols(cross)?;
    let num = g.scale(num, 2.0);
    let sq = g.mul(y, y)?;
    let sq = g.sum_cols(sq)?;
    let msq = g.mul(mean, mean)?;
    let msq = g.sum_all(msq)?;
    let den = g.add(sq, msq)?;
    g.div(den, num)
}

fn graph_eicw(g: &mut Graph, y: Var) -> Result<Var> {
    let inv = graph_inverse_dsc(g, y)?;
    let w = g.softmax(inv, 0)?;
    weighted_rows(g, y, w)
}

fn graph_em(g: &mut Graph, y: Var) -> Result<Var> {
    let w = g.softmax(y, 0)?;
    weighted_rows(g, y, w)
}

fn graph_tower_softmax(g: &mut Graph, vars: &AggVars, n: usize) -> Result<Var> {
    match vars.tower_logits {
        Some(l) => g.softmax(l, 0),
        None => Ok(g.constant(Tensor::full(&[n, 1], 1.0 / n as f64))),
    }
}

/// Graph version of [`aggregate`] over stacked predictions `y` (`n × K`).
/// Returns the renormalized `1 × K` aggregate.
pub fn graph_aggregate(g: &mut Graph, y: Var, settings: &AggSettings, vars: &AggVars, training: bool) -> Result<Var> {
    let value = g.value(y).clone();
    let (n, k) = value.dims2()?;
    let rows: Vec<Vec<f64>> = (0..n).map(|i| value.row(i).to_vec()).collect();
    let raw = match settings.kind {
        AggKind::Adaptive => {
            let a = graph_eicw(g, y)?;
            let m = graph_em(g, y)?;
            let raw_beta = match vars.beta_raw {
                Some(v) => v,
                None => g.constant(Tensor::scalar(settings.beta.raw)),
            };
            let b = g.sigmoid(raw_beta);
            let diff = g.sub(a, m)?;
            let shift = g.mul(diff, b)?;
            g.add(m, shift)?
        }
        AggKind::Avg => g.mean_rows(y)?,
        AggKind::Softmax | AggKind::Em => graph_em(g, y)?,
        AggKind::Eicw => graph_eicw(g, y)?,
        AggKind::Icw => {
            let inv = graph_inverse_dsc(g, y)?;
            let s = g.sum_all(inv)?;
            let w = g.div(inv, s)?;
            weighted_rows(g, y, w)?
        }
        AggKind::Top if training => {
            let m = g.max_cols(y)?;
            let m = g.scale(m, 1.0 / TOP_TEMPERATURE);
            let w = g.softmax(m, 0)?;
            weighted_rows(g, y, w)?
        }
        AggKind::Top => {
            let mut w = Tensor::zeros(&[n, 1]);
            w.data[top_index(&rows)] = 1.0;
            let w = g.constant(w);
            weighted_rows(g, y, w)?
        }
        AggKind::Gate => {
            let w = Tensor::new(vec![n, 1], gate_mask(&rows, settings.gate_theta))?;
            let w = g.constant(w);
            weighted_rows(g, y, w)?
        }
        AggKind::Weighted => {
            let w = graph_tower_softmax(g, vars, n)?;
            weighted_rows(g, y, w)?
        }
        AggKind::WeightedTheta => {
            let theta = theta_floor(n);
            let s = graph_tower_softmax(g, vars, n)?;
            let s = g.scale(s, 1.0 - n as f64 * theta);
            let w = g.add_scalar(s, theta);
            weighted_rows(g, y, w)?
        }
    };
    debug_assert_eq!(g.value(raw).shape, vec![1, k]);
    let total = g.sum_all(raw)?;
    g.div(raw, total)
}

/// `−log agg[label]`.
pub fn graph_nll(g: &mut Graph, aggregated: Var, label: usize) -> Result<Var> {
    let p = g.pick(aggregated, label)?;
    let l = g.log(p);
    Ok(g.scale(l, -1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn dsc_examples() {
        assert_eq!(dsc(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 1.0);
        assert_eq!(dsc(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((dsc(&[0.7, 0.3], &[0.4, 0.6]).unwrap() - 0.92 / 1.10).abs() < 1e-12);
        assert!(matches!(dsc(&[0.0, 0.0], &[0.0, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn em_two_tower_column() {
        let w = em(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap().weights;
        let e = std::f64::consts::E;
        assert!((w[0][0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((w[1][0] - 1.0 / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn single_tower_passthrough() {
        let y = vec![vec![0.2, 0.8]];
        assert_eq!(eicw(&y).unwrap().weights, vec![1.0]);
        assert!(close(&em(&y).unwrap().aggregate, &y[0], 1e-15));
    }

    #[test]
    fn variant_examples() {
        let avg = variant("avg", &[vec![1.0, 0.0], vec![0.0, 1.0]], None).unwrap();
        assert_eq!(avg, vec![0.5, 0.5]);
        let y = vec![vec![0.9, 0.1], vec![0.6, 0.4]];
        assert!(close(&variant("top", &y, None).unwrap(), &[0.9, 0.1], 1e-15));
        let gate = variant("gate", &y, Some(0.1)).unwrap();
        assert!(close(&gate, &variant("avg", &y, None).unwrap(), 1e-15));
        assert!(matches!(variant("gate", &y, None), Err(Error::Config(_))));
        assert!(matches!(variant("median", &y, None), Err(Error::Config(_))));
    }

    #[test]
    fn label_tie_break() {
        assert_eq!(eap_label(&[0.2, 0.5, 0.3]), 1);
        assert_eq!(eap_label(&[0.25; 4]), 0);
    }

    #[test]
    fn beta_starts_at_half() {
        assert_eq!(BetaParam::default().beta(), 0.5);
    }

    #[test]
    fn graph_matches_pure() {
        let y = vec![vec![0.7, 0.2, 0.1], vec![0.3, 0.3, 0.4], vec![0.05, 0.9, 0.05]];
        for kind in AggKind::ALL {
            let mut settings = AggSettings::new(kind);
            settings.beta = BetaParam::new(0.3);
            if kind.has_tower_weights() {
                settings.tower_logits = vec![0.5, -0.2, 0.1];
            }
            for training in [false, true] {
                let pure = aggregate(&y, &settings, training).unwrap();
                let mut g = Graph::new();
                let yv = g.constant(Tensor::from_rows(&y));
                let vars = AggVars {
                    beta_raw: None,
                    tower_logits: kind
                        .has_tower_weights()
                        .then(|| g.constant(Tensor::new(vec![3, 1], settings.tower_logits.clone()).unwrap())),
                };
                let out = graph_aggregate(&mut g, yv, &settings, &vars, training).unwrap();
                assert!(close(&g.value(out).data, &pure, 1e-12), "{kind} training={training}");
            }
        }
    }
}
