//! Dense sensor datasets and everything needed to turn them into sparse
//! observation windows: loading, Bernoulli sparsification, feature
//! construction, windowing, temporal splits and a synthetic generator.

mod features;
mod load;
mod sparsify;
mod split;
mod synth;
mod window;

use chrono::NaiveDateTime;
use ndarray::Array2;

use crate::error::{Error, Result};

pub use features::{build_features, BoundingBox, FeatureTable, Normalizer, Position, TimeFeatures};
pub use load::{load_dense_dataset, read_mask_csv, save_dense_dataset, write_mask_csv, DatasetMeta};
pub use sparsify::{sparsify, SparseMask};
pub use split::{split, SplitRanges, SplitSpec};
pub use synth::{cluster_of, synth_generate, SynthConfig};
pub use window::{window, Observation, SampleWindow, DEFAULT_LEAD_TIME, OBSERVATION_FEATURES};

/// Ground-truth sensor field: `n` timesteps of `k` speed readings.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseDataset {
    readings: Array2<f64>,
    sensor_ids: Vec<String>,
    sensor_coords: Array2<f64>,
    start_time: NaiveDateTime,
    interval_minutes: u32,
}

impl DenseDataset {
    pub fn new(
        readings: Array2<f64>,
        sensor_ids: Vec<String>,
        sensor_coords: Array2<f64>,
        start_time: NaiveDateTime,
        interval_minutes: u32,
    ) -> Result<Self> {
        let (n, k) = readings.dim();
        if k == 0 || n == 0 {
            return Err(Error::Dataset(format!("empty readings ({n} x {k})")));
        }
        if sensor_coords.dim() != (k, 2) {
            return Err(Error::Dataset(format!(
                "sensor coordinates are {:?}, expected ({k}, 2)",
                sensor_coords.dim()
            )));
        }
        if sensor_ids.len() != k {
            return Err(Error::Dataset(format!(
                "{} sensor ids for {k} reading columns",
                sensor_ids.len()
            )));
        }
        if interval_minutes == 0 {
            return Err(Error::Dataset("interval_minutes must be positive".into()));
        }
        if let Some(((t, j), _)) = readings.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Dataset(format!("non-finite reading at timestep {t}, sensor {j}")));
        }
        if sensor_coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dataset("non-finite sensor coordinate".into()));
        }
        Ok(Self {
            readings,
            sensor_ids,
            sensor_coords,
            start_time,
            interval_minutes,
        })
    }

    pub fn n(&self) -> usize {
        self.readings.nrows()
    }

    pub fn k(&self) -> usize {
        self.readings.ncols()
    }

    pub fn readings(&self) -> &Array2<f64> {
        &self.readings
    }

    pub fn sensor_ids(&self) -> &[String] {
        &self.sensor_ids
    }

    /// `[k × 2]` latitude/longitude in degrees.
    pub fn sensor_coords(&self) -> &Array2<f64> {
        &self.sensor_coords
    }

    pub fn start_time(&self) -> NaiveDateTime {
        self.start_time
    }

    pub fn interval_minutes(&self) -> u32 {
        self.interval_minutes
    }

    pub fn timestamp(&self, t: usize) -> NaiveDateTime {
        self.start_time + chrono::Duration::minutes(t as i64 * self.interval_minutes as i64)
    }

    /// `D ⊙ m`: readings with dropped entries set to zero.
    pub fn masked(&self, mask: &SparseMask) -> Array2<f64> {
        let mut out = self.readings.clone();
        out.zip_mut_with(mask.mask(), |v, &m| {
            if m == 0 {
                *v = 0.0;
            }
        });
        out
    }
}
