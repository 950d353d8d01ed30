use std::sync::Arc;

use super::{DenseDataset, FeatureTable, Position, SparseMask, TimeFeatures};
use crate::error::{Error, Result};

pub const DEFAULT_LEAD_TIME: usize = 12;

/// Width of [`Observation::features`].
pub const OBSERVATION_FEATURES: usize = 5;

/// One sparse reading: where and when it was taken plus its value channels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    /// Step inside the window, `0..lead_time`.
    pub t: usize,
    /// Source sensor column. Only dense baselines look at this.
    pub sensor: usize,
    pub position: Position,
    pub speed: f64,
    pub time: TimeFeatures,
}

impl Observation {
    /// `[speed, time_of_day, day_of_week, lat, lon]`.
    pub fn features(&self) -> [f64; OBSERVATION_FEATURES] {
        [
            self.speed,
            self.time.time_of_day,
            self.time.day_of_week(),
            self.position.lat,
            self.position.lon,
        ]
    }
}

/// `lead_time` steps of observations followed by one dense target row.
#[derive(Clone, Debug)]
pub struct SampleWindow {
    /// Index of the window's first timestep in the dataset.
    pub start: usize,
    pub steps: Vec<Vec<Observation>>,
    pub step_times: Vec<TimeFeatures>,
    pub query_locations: Arc<Vec<Position>>,
    /// Raw (denormalized) readings at the target step, one per query.
    pub targets: Vec<f64>,
    pub target_time: TimeFeatures,
    /// Day slot of the target step, for climatology lookups.
    pub target_slot: usize,
}

impl SampleWindow {
    pub fn lead_time(&self) -> usize {
        self.steps.len()
    }

    pub fn num_observations(&self) -> usize {
        self.steps.iter().map(Vec::len).sum()
    }

    pub fn context(&self) -> TimeFeatures {
        self.step_times[0]
    }
}

/// Slides a `lead_time + 1` window with stride 1 over the dataset.
pub fn window(
    dataset: &DenseDataset,
    mask: &SparseMask,
    features: &FeatureTable,
    lead_time: usize,
) -> Result<Vec<SampleWindow>> {
    let (n, k) = (dataset.n(), dataset.k());
    if lead_time == 0 {
        return Err(Error::Config("lead_time must be positive".into()));
    }
    if n < lead_time + 1 {
        return Err(Error::Dataset(format!(
            "{n} timesteps cannot hold a window of {lead_time} + 1"
        )));
    }
    if mask.mask().dim() != (n, k) {
        return Err(Error::Shape(format!(
            "mask is {:?}, readings are ({n}, {k})",
            mask.mask().dim()
        )));
    }

    let mut windows = Vec::with_capacity(n - lead_time);
    for start in 0..n - lead_time {
        let mut steps = Vec::with_capacity(lead_time);
        for step in 0..lead_time {
            let t = start + step;
            let obs: Vec<Observation> = (0..k)
                .filter(|&j| mask.is_kept(t, j))
                .map(|j| Observation {
                    t: step,
                    sensor: j,
                    position: features.positions[j],
                    speed: features.speeds[[t, j]],
                    time: features.times[t],
                })
                .collect();
            steps.push(obs);
        }
        let target_row = start + lead_time;
        windows.push(SampleWindow {
            start,
            steps,
            step_times: features.times[start..start + lead_time].to_vec(),
            query_locations: Arc::clone(&features.positions),
            targets: dataset.readings().row(target_row).to_vec(),
            target_time: features.times[target_row],
            target_slot: features.slots[target_row],
        });
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{build_features, sparsify};
    use chrono::NaiveDate;
    use ndarray::Array2;

    fn dataset(n: usize, k: usize) -> DenseDataset {
        let readings = Array2::from_shape_fn((n, k), |(t, j)| 50.0 + t as f64 + 0.1 * j as f64);
        let coords = Array2::from_shape_fn((k, 2), |(j, c)| j as f64 + c as f64);
        let start = NaiveDate::from_ymd_opt(2012, 3, 5).unwrap().and_hms_opt(6, 0, 0).unwrap();
        DenseDataset::new(readings, (0..k).map(|j| format!("s{j}")).collect(), coords, start, 5).unwrap()
    }

    #[test]
    fn thirteen_steps_make_one_window() {
        let ds = dataset(13, 3);
        let f = build_features(&ds, 13).unwrap();
        let w = window(&ds, &SparseMask::full(13, 3), &f, 12).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].num_observations(), 36);
        assert_eq!(w[0].targets, ds.readings().row(12).to_vec());
    }

    #[test]
    fn too_short_dataset_is_rejected() {
        let ds = dataset(12, 3);
        let f = build_features(&ds, 12).unwrap();
        assert!(window(&ds, &SparseMask::full(12, 3), &f, 12).is_err());
    }

    #[test]
    fn all_dropped_window_has_no_observations_but_dense_targets() {
        let ds = dataset(20, 4);
        let f = build_features(&ds, 20).unwrap();
        let mask = sparsify(&ds, 1.0, 0).unwrap();
        let w = window(&ds, &mask, &f, 12).unwrap();
        assert_eq!(w.len(), 8);
        for win in &w {
            assert_eq!(win.num_observations(), 0);
            assert_eq!(win.targets, ds.readings().row(win.start + 12).to_vec());
            assert_eq!(win.query_locations.len(), 4);
        }
    }

    #[test]
    fn observations_follow_mask_entries() {
        let ds = dataset(13, 5);
        let f = build_features(&ds, 13).unwrap();
        let mut m = Array2::zeros((13, 5));
        m[[0, 2]] = 1;
        m[[4, 0]] = 1;
        m[[11, 4]] = 1;
        m[[12, 1]] = 1; // target row, never an observation
        let mask = SparseMask::from_matrix(m).unwrap();
        let w = window(&ds, &mask, &f, 12).unwrap();
        let slots: Vec<(usize, usize)> = w[0]
            .steps
            .iter()
            .flatten()
            .map(|o| (o.t, o.sensor))
            .collect();
        assert_eq!(slots, vec![(0, 2), (4, 0), (11, 4)]);
        let o = w[0].steps[4][0];
        assert!((o.speed - f.normalizer.normalize(ds.readings()[[4, 0]])).abs() < 1e-12);
        assert_eq!(o.time, f.times[4]);
    }
}
