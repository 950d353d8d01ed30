//! Result files: CSV rows, JSON documents and atomic writes.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use suster::metrics::{Metrics, Stat};
use suster::training::EpochRecord;

/// Writes to a sibling temp file, then renames over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", path.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("flushing csv: {e}"))?;
    write_atomic(path, &bytes)
}

/// Header-only files are valid for empty row sets.
pub fn write_csv_with_header<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("flushing csv: {e}"))?;
    write_atomic(path, &bytes)
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}

pub const HISTORY_HEADER: [&str; 6] = ["epoch", "train_mae", "val_mae", "val_rmse", "val_mape", "seconds"];
pub const REPORT_HEADER: [&str; 7] = ["model", "dropout", "seed", "split", "mae", "rmse", "mape"];

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    write_csv_with_header(path, &HISTORY_HEADER, history)
}

/// One metric row of a report file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub dropout: f64,
    pub seed: u64,
    pub split: String,
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
}

impl ReportRow {
    pub fn new(model: &str, dropout: f64, seed: u64, split: &str, m: Metrics) -> Self {
        Self {
            model: model.to_owned(),
            dropout,
            seed,
            split: split.to_owned(),
            mae: m.mae,
            rmse: m.rmse,
            mape: m.mape,
        }
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            mae: self.mae,
            rmse: self.rmse,
            mape: self.mape,
        }
    }
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    write_csv_with_header(path, &REPORT_HEADER, rows)
}

/// Mean and sample std of each metric over a group of runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub dropout: f64,
    pub runs: usize,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub mape_mean: f64,
    pub mape_std: f64,
}

impl SummaryRow {
    pub fn of(model: &str, dropout: f64, runs: &[Metrics]) -> Self {
        let col = |f: fn(&Metrics) -> f64| Stat::of(&runs.iter().map(f).collect::<Vec<_>>());
        let (mae, rmse, mape) = (col(|m| m.mae), col(|m| m.rmse), col(|m| m.mape));
        Self {
            model: model.to_owned(),
            dropout,
            runs: runs.len(),
            mae_mean: mae.mean,
            mae_std: mae.std,
            rmse_mean: rmse.mean,
            rmse_std: rmse.std,
            mape_mean: mape.mean,
            mape_std: mape.std,
        }
    }
}

/// Groups report rows by `(model, dropout)` in first-seen order.
pub fn summarize(rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|(m, d)| *m == r.model && *d == r.dropout) {
            keys.push((r.model.clone(), r.dropout));
        }
    }
    keys.iter()
        .map(|(model, dropout)| {
            let runs: Vec<Metrics> = rows
                .iter()
                .filter(|r| r.model == *model && r.dropout == *dropout)
                .map(ReportRow::metrics)
                .collect();
            SummaryRow::of(model, *dropout, &runs)
        })
        .collect()
}

/// Models whose mean MAE drops somewhere as dropout grows.
pub fn monotonicity_flags(summary: &[SummaryRow]) -> Vec<(String, String)> {
    let mut models: Vec<&str> = Vec::new();
    for s in summary {
        if !models.contains(&s.model.as_str()) {
            models.push(&s.model);
        }
    }
    let mut flags = Vec::new();
    for model in models {
        let mut pts: Vec<(f64, f64)> = summary
            .iter()
            .filter(|s| s.model == model)
            .map(|s| (s.dropout, s.mae_mean))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let drops: Vec<String> = pts
            .windows(2)
            .filter(|w| w[1].1 < w[0].1)
            .map(|w| format!("{:.4} at {} < {:.4} at {}", w[1].1, w[1].0, w[0].1, w[0].0))
            .collect();
        if !drops.is_empty() {
            flags.push((model.to_owned(), drops.join("; ")));
        }
    }
    flags
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(model: &str, dropout: f64, seed: u64, mae: f64) -> ReportRow {
        ReportRow::new(model, dropout, seed, "test", Metrics { mae, rmse: mae, mape: 0.0 })
    }

    #[test]
    fn summary_counts_groups() {
        let rows: Vec<ReportRow> = ["a", "b"]
            .iter()
            .flat_map(|m| [0.5, 0.9].into_iter().flat_map(move |d| (0..2).map(move |s| row(m, d, s, 1.0 + d))))
            .collect();
        assert_eq!(rows.len(), 8);
        let summary = summarize(&rows);
        assert_eq!(summary.len(), 4);
        assert!(summary.iter().all(|s| s.runs == 2 && s.mae_std == 0.0));
    }

    #[test]
    fn flags_decreasing_error() {
        let rows = vec![row("a", 0.1, 0, 2.0), row("a", 0.9, 0, 1.0), row("b", 0.1, 0, 1.0), row("b", 0.9, 0, 3.0)];
        let flags = monotonicity_flags(&summarize(&rows));
        assert_eq!(flags.len(), 1);
        assert_eq!(flags[0].0, "a");
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        let rows = vec![row("suster", 0.99, 3, 1.25)];
        write_report(&path, &rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("model,dropout,seed,split,mae,rmse,mape\n"));
        assert_eq!(read_csv::<ReportRow>(&path).unwrap(), rows);
    }
}
