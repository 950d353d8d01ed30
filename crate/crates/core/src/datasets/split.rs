use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Contiguous temporal split fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Keeps only this leading share of the training windows.
    pub train_subfraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            val_fraction: 0.1,
            test_fraction: 0.2,
            train_subfraction: 1.0,
        }
    }
}

/// Index ranges of each split over a window sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SplitSpec {
    pub fn with_subfraction(self, train_subfraction: f64) -> Self {
        Self {
            train_subfraction,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train_fraction, self.val_fraction, self.test_fraction];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config(format!("split fractions out of range: {parts:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must sum to 1: {parts:?}")));
        }
        if !(self.train_subfraction > 0.0 && self.train_subfraction <= 1.0) {
            return Err(Error::Config(format!(
                "train_subfraction must lie in (0, 1], got {}",
                self.train_subfraction
            )));
        }
        Ok(())
    }

    /// Ranges over `count` windows. Val and test do not depend on the
    /// training subfraction.
    pub fn ranges(&self, count: usize) -> Result<SplitRanges> {
        self.validate()?;
        let n_train = (self.train_fraction * count as f64).round() as usize;
        let n_val = (self.val_fraction * count as f64).round() as usize;
        let n_train = n_train.min(count);
        let n_val = n_val.min(count - n_train);
        let kept = ((self.train_subfraction * n_train as f64).round() as usize).min(n_train);
        let ranges = SplitRanges {
            train: 0..kept,
            val: n_train..n_train + n_val,
            test: n_train + n_val..count,
        };
        if ranges.train.is_empty() {
            return Err(Error::EmptySplit("train"));
        }
        if ranges.val.is_empty() {
            return Err(Error::EmptySplit("val"));
        }
        if ranges.test.is_empty() {
            return Err(Error::EmptySplit("test"));
        }
        Ok(ranges)
    }

    /// Number of leading dataset rows touched by the (possibly truncated)
    /// training windows, for normalization statistics.
    pub fn train_rows(&self, n: usize, lead_time: usize) -> Result<usize> {
        let windows = n.saturating_sub(lead_time);
        let r = self.ranges(windows)?;
        Ok(r.train.end + lead_time)
    }
}

/// Splits a window sequence into contiguous `(train, val, test)` slices.
pub fn split<'a, T>(windows: &'a [T], spec: &SplitSpec) -> Result<(&'a [T], &'a [T], &'a [T])> {
    let r = spec.ranges(windows.len())?;
    Ok((&windows[r.train], &windows[r.val], &windows[r.test]))
}
