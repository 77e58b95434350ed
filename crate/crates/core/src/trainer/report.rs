//! CSV and JSON result artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EpochMetrics, MetricsRecord, RunConfig};
use crate::error::{Error, Result};

/// One CSV line: accuracy of one run at one ρ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub axis_value: String,
    pub rho: f64,
    pub agg_top1: f64,
    pub towers: Vec<f64>,
    pub seed: u64,
}

/// JSON companion of a CSV row group: the full config and β trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub axis_value: String,
    pub seed: u64,
    pub config: RunConfig,
    pub beta_trajectory: Vec<f64>,
    pub epochs: Vec<EpochMetrics>,
    pub param_count: usize,
    pub latent_param_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportJson {
    pub rows: Vec<ReportRow>,
    pub runs: Vec<RunSummary>,
}

pub fn records_to_rows(records: &[(String, MetricsRecord)]) -> Vec<ReportRow> {
    records
        .iter()
        .flat_map(|(value, rec)| {
            rec.evals.iter().map(move |e| ReportRow {
                axis_value: value.clone(),
                rho: e.rho,
                agg_top1: e.agg_top1,
                towers: e.tower_top1.clone(),
                seed: rec.seed,
            })
        })
        .collect()
}

pub fn header(towers: usize) -> Vec<String> {
    let mut h = vec!["axis_value".to_string(), "rho".into(), "agg_top1".into()];
    h.extend((1..=towers).map(|i| format!("tower_{i}")));
    h.push("seed".into());
    h
}

fn width(rows: &[ReportRow]) -> usize {
    rows.iter().map(|r| r.towers.len()).max().unwrap_or(0)
}

pub fn emit_csv(rows: &[ReportRow]) -> Result<String> {
    let n = width(rows);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header(n))?;
    for r in rows {
        let mut rec = vec![r.axis_value.clone(), r.rho.to_string(), r.agg_top1.to_string()];
        rec.extend((0..n).map(|i| r.towers.get(i).map_or(String::new(), f64::to_string)));
        rec.push(r.seed.to_string());
        w.write_record(rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv flush failed: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Format(format!("bad {what} value '{s}'")))
}

pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let head: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if head.len() < 4 || head[..3] != ["axis_value", "rho", "agg_top1"] || head[head.len() - 1] != "seed" {
        return Err(Error::Format(format!("unexpected CSV header {head:?}")));
    }
    let n = head.len() - 4;
    if head != header(n) {
        return Err(Error::Format(format!("unexpected CSV header {head:?}")));
    }
    r.records()
        .map(|rec| {
            let rec = rec?;
            let towers = (0..n)
                .map(|i| &rec[3 + i])
                .filter(|s| !s.is_empty())
                .map(|s| parse_f64(s, "tower"))
                .collect::<Result<_>>()?;
            Ok(ReportRow {
                axis_value: rec[0].to_string(),
                rho: parse_f64(&rec[1], "rho")?,
                agg_top1: parse_f64(&rec[2], "agg_top1")?,
                towers,
                seed: rec[n + 3].parse().map_err(|_| Error::Format(format!("bad seed '{}'", &rec[n + 3])))?,
            })
        })
        .collect()
}

pub fn write_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    fs::write(path, emit_csv(rows)?)?;
    Ok(())
}

/// Adds rows to an existing CSV (or creates it). The file is rewritten when
/// the new rows need more tower columns than its header has.
pub fn append_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut all = if path.exists() { parse_csv(&fs::read_to_string(path)?)? } else { Vec::new() };
    all.extend_from_slice(rows);
    write_csv(path, &all)
}

/// Writes `results.csv` and `results.json` into `out_dir`.
pub fn report(records: &[(String, MetricsRecord)], out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(out_dir)?;
    let rows = records_to_rows(records);
    let runs = records
        .iter()
        .map(|(value, rec)| RunSummary {
            axis_value: value.clone(),
            seed: rec.seed,
            config: rec.config.clone(),
            beta_trajectory: rec.beta_trajectory.clone(),
            epochs: rec.epochs.clone(),
            param_count: rec.param_count,
            latent_param_bytes: rec.latent_param_count * std::mem::size_of::<f64>(),
        })
        .collect();
    let csv_path = out_dir.join("results.csv");
    let json_path = out_dir.join("results.json");
    write_csv(&csv_path, &rows)?;
    fs::write(&json_path, serde_json::to_string_pretty(&ReportJson { rows, runs })?)?;
    Ok((csv_path, json_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &str, rho: f64, towers: Vec<f64>) -> ReportRow {
        ReportRow {
            axis_value: v.into(),
            rho,
            agg_top1: 0.1 + rho / 3.0,
            towers,
            seed: 7,
        }
    }

    #[test]
    fn header_is_exact() {
        let text = emit_csv(&[row("a", 0.5, vec![0.25, 0.5])]).unwrap();
        assert_eq!(text.lines().next().unwrap(), "axis_value,rho,agg_top1,tower_1,tower_2,seed");
        assert_eq!(emit_csv(&[]).unwrap(), "axis_value,rho,agg_top1,seed\n");
    }

    #[test]
    fn round_trip_with_ragged_towers() {
        let rows = vec![row("n=1", 0.1, vec![1.0 / 3.0]), row("n=2", 0.7, vec![0.2, 0.9])];
        assert_eq!(parse_csv(&emit_csv(&rows).unwrap()).unwrap(), rows);
        assert!(parse_csv(&emit_csv(&[]).unwrap()).unwrap().is_empty());
    }
}
