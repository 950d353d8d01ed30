//! Error metrics in denormalized units and their aggregation across runs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Targets with `|y| <= MAPE_EPSILON` are left out of MAPE.
pub const MAPE_EPSILON: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Fraction, not percent.
    pub mape: f64,
}

/// Streaming sums for MAE / RMSE / MAPE.
#[derive(Clone, Copy, Debug, Default)]
pub struct MetricAccumulator {
    count: usize,
    abs: f64,
    sq: f64,
    pct_count: usize,
    pct: f64,
}

impl MetricAccumulator {
    pub fn push(&mut self, predicted: f64, actual: f64) {
        let err = predicted - actual;
        self.count += 1;
        self.abs += err.abs();
        self.sq += err * err;
        if actual.abs() > MAPE_EPSILON {
            self.pct_count += 1;
            self.pct += err.abs() / actual.abs();
        }
    }

    pub fn extend(&mut self, predicted: &[f64], actual: &[f64]) {
        debug_assert_eq!(predicted.len(), actual.len());
        for (&p, &a) in predicted.iter().zip(actual) {
            self.push(p, a);
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(&self) -> Result<Metrics> {
        if self.count == 0 {
            return Err(Error::EmptySplit("evaluation"));
        }
        let n = self.count as f64;
        Ok(Metrics {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            mape: if self.pct_count == 0 {
                0.0
            } else {
                self.pct / self.pct_count as f64
            },
        })
    }
}

pub fn compute_metrics(predicted: &[f64], actual: &[f64]) -> Result<Metrics> {
    let mut acc = MetricAccumulator::default();
    acc.extend(predicted, actual);
    acc.finish()
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len();
        if n == 0 {
            return Stat::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Stat { mean, std }
    }
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

/// Metrics of one or more runs on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub split: String,
    pub mae: Stat,
    pub rmse: Stat,
    pub mape: Stat,
    pub seeds: Vec<u64>,
    pub seconds: f64,
    pub mape_epsilon: f64,
}

impl MetricReport {
    pub fn aggregate(model: &str, split: &str, runs: &[(u64, Metrics)], seconds: f64) -> Self {
        let col = |f: fn(&Metrics) -> f64| Stat::of(&runs.iter().map(|(_, m)| f(m)).collect::<Vec<_>>());
        Self {
            model: model.to_owned(),
            split: split.to_owned(),
            mae: col(|m| m.mae),
            rmse: col(|m| m.rmse),
            mape: col(|m| m.mape),
            seeds: runs.iter().map(|(s, _)| *s).collect(),
            seconds,
            mape_epsilon: MAPE_EPSILON,
        }
    }
}
