use std::sync::Arc;

use chrono::{Datelike, Timelike};
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::DenseDataset;
use crate::error::{Error, Result};

/// Calendar channels of one timestep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeFeatures {
    /// Fraction of the day elapsed, in `[0, 1)`.
    pub time_of_day: f64,
    /// Weekday index (Monday = 0 … Sunday = 6).
    pub day_code: u8,
}

impl TimeFeatures {
    pub fn from_timestamp(ts: chrono::NaiveDateTime) -> Self {
        let minutes = ts.hour() * 60 + ts.minute();
        let seconds = minutes as f64 * 60.0 + ts.second() as f64;
        Self {
            time_of_day: seconds / 86_400.0,
            day_code: ts.weekday().num_days_from_monday() as u8,
        }
    }

    /// Day-of-week as the scalar `index / 7`.
    pub fn day_of_week(&self) -> f64 {
        self.day_code as f64 / 7.0
    }

    /// `(time_of_day, day_of_week)` context vector.
    pub fn context(&self) -> [f64; 2] {
        [self.time_of_day, self.day_of_week()]
    }
}

/// Sensor position scaled into `[0, 1]²` by the dataset bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_lat: f64,
    pub max_lat: f64,
    pub min_lon: f64,
    pub max_lon: f64,
}

impl BoundingBox {
    pub fn of(coords: &Array2<f64>) -> Self {
        let lat = coords.column(0);
        let lon = coords.column(1);
        Self {
            min_lat: lat.iter().copied().fold(f64::INFINITY, f64::min),
            max_lat: lat.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            min_lon: lon.iter().copied().fold(f64::INFINITY, f64::min),
            max_lon: lon.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }

    fn scale(v: f64, lo: f64, hi: f64) -> f64 {
        if hi > lo {
            (v - lo) / (hi - lo)
        } else {
            0.0
        }
    }

    pub fn normalize(&self, lat: f64, lon: f64) -> Position {
        Position {
            lat: Self::scale(lat, self.min_lat, self.max_lat),
            lon: Self::scale(lon, self.min_lon, self.max_lon),
        }
    }

    pub fn denormalize(&self, p: Position) -> (f64, f64) {
        (
            self.min_lat + p.lat * (self.max_lat - self.min_lat),
            self.min_lon + p.lon * (self.max_lon - self.min_lon),
        )
    }
}

/// Z-score speed normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Normalizer {
    pub fn fit<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<Self> {
        let mut count = 0usize;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for &v in values {
            count += 1;
            sum += v;
            sq += v * v;
        }
        if count == 0 {
            return Err(Error::Degenerate("no training readings to normalize".into()));
        }
        let mean = sum / count as f64;
        let var = (sq / count as f64 - mean * mean).max(0.0);
        let std = var.sqrt();
        if std <= 1e-12 * mean.abs().max(1.0) {
            return Err(Error::Degenerate(format!(
                "training speeds have zero variance (constant {mean})"
            )));
        }
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Per-(timestep, sensor) input channels.
#[derive(Clone, Debug)]
pub struct FeatureTable {
    pub normalizer: Normalizer,
    pub bbox: BoundingBox,
    /// Normalized sensor positions, shared with every window's query list.
    pub positions: Arc<Vec<Position>>,
    pub times: Vec<TimeFeatures>,
    /// Z-scored speeds `[n × k]`.
    pub speeds: Array2<f64>,
    /// Timestep slot within the day (`minute_of_day / interval`).
    pub slots: Vec<usize>,
    pub slots_per_day: usize,
}

impl FeatureTable {
    /// Five channels: normalized speed, time of day, day of week, normalized
    /// latitude, normalized longitude.
    pub fn features(&self, t: usize, sensor: usize) -> [f64; 5] {
        let tf = self.times[t];
        let p = self.positions[sensor];
        [
            self.speeds[[t, sensor]],
            tf.time_of_day,
            tf.day_of_week(),
            p.lat,
            p.lon,
        ]
    }
}

/// Builds the feature table. Speed statistics come from the first
/// `train_rows` timesteps only.
pub fn build_features(dataset: &DenseDataset, train_rows: usize) -> Result<FeatureTable> {
    let rows = train_rows.min(dataset.n());
    let normalizer = Normalizer::fit(dataset.readings().slice(s![..rows, ..]).iter())?;
    let bbox = BoundingBox::of(dataset.sensor_coords());
    let positions: Vec<Position> = dataset
        .sensor_coords()
        .rows()
        .into_iter()
        .map(|c| bbox.normalize(c[0], c[1]))
        .collect();
    let interval = dataset.interval_minutes() as usize;
    let slots_per_day = (1440 / interval).max(1);
    let mut times = Vec::with_capacity(dataset.n());
    let mut slots = Vec::with_capacity(dataset.n());
    for t in 0..dataset.n() {
        let ts = dataset.timestamp(t);
        times.push(TimeFeatures::from_timestamp(ts));
        let minute = (ts.hour() * 60 + ts.minute()) as usize;
        slots.push((minute / interval).min(slots_per_day - 1));
    }
    let speeds = dataset.readings().mapv(|v| normalizer.normalize(v));
    Ok(FeatureTable {
        normalizer,
        bbox,
        positions: Arc::new(positions),
        times,
        speeds,
        slots,
        slots_per_day,
    })
}
