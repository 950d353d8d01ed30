//! Desk-scale stand-in for loop-detector speed data.
//!
//! Sensors sit in spatial clusters. Each cluster has its own free-flow speed
//! and rush-hour dips (shallower on weekends). On top of the profile ride a
//! slow network-wide AR(1) component, a per-cluster AR(1) component and
//! per-sensor white noise, all scaled by `noise`; with `noise = 0` every
//! sensor emits its cluster profile exactly.

use chrono::{Datelike, NaiveDateTime, Timelike};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::DenseDataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub k: usize,
    pub n: usize,
    pub clusters: usize,
    /// Stationary standard deviation of each AR component, in speed units.
    pub noise: f64,
    pub seed: u64,
    #[serde(default = "default_interval")]
    pub interval_minutes: u32,
    #[serde(default = "default_start")]
    pub start_time: NaiveDateTime,
}

fn default_interval() -> u32 {
    5
}

fn default_start() -> NaiveDateTime {
    chrono::NaiveDate::from_ymd_opt(2012, 3, 1)
        .expect("valid date")
        .and_hms_opt(0, 0, 0)
        .expect("valid time")
}

impl SynthConfig {
    pub fn new(k: usize, n: usize, clusters: usize, noise: f64, seed: u64) -> Self {
        Self {
            k,
            n,
            clusters,
            noise,
            seed,
            interval_minutes: default_interval(),
            start_time: default_start(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ClusterProfile {
    free_flow: f64,
    am_depth: f64,
    am_center: f64,
    am_width: f64,
    pm_depth: f64,
    pm_center: f64,
    pm_width: f64,
}

const WEEKEND_DIP_SCALE: f64 = 0.3;
const GLOBAL_PHI: f64 = 0.995;
const CLUSTER_PHI: f64 = 0.98;
const SENSOR_NOISE_SHARE: f64 = 0.25;

impl ClusterProfile {
    fn draw<R: Rng>(rng: &mut R) -> Self {
        Self {
            free_flow: rng.random_range(55.0..70.0),
            am_depth: rng.random_range(8.0..30.0),
            am_center: rng.random_range(7.0..9.0),
            am_width: rng.random_range(0.6..1.4),
            pm_depth: rng.random_range(8.0..30.0),
            pm_center: rng.random_range(16.0..18.5),
            pm_width: rng.random_range(0.8..1.8),
        }
    }

    fn speed(&self, ts: NaiveDateTime) -> f64 {
        let hour = ts.hour() as f64 + ts.minute() as f64 / 60.0;
        let weekend = ts.weekday().num_days_from_monday() >= 5;
        let bump = |center: f64, width: f64| (-0.5 * ((hour - center) / width).powi(2)).exp();
        let dips = self.am_depth * bump(self.am_center, self.am_width)
            + self.pm_depth * bump(self.pm_center, self.pm_width);
        let scale = if weekend { WEEKEND_DIP_SCALE } else { 1.0 };
        self.free_flow - scale * dips
    }
}

fn ar_step<R: Rng>(rng: &mut R, state: f64, phi: f64, sd: f64) -> f64 {
    let innovation = sd * (1.0 - phi * phi).sqrt();
    phi * state + innovation * Normal::new(0.0, 1.0).expect("unit normal").sample(rng)
}

/// Sensor `j` belongs to cluster `j % clusters`.
pub fn cluster_of(sensor: usize, clusters: usize) -> usize {
    sensor % clusters
}

pub fn synth_generate(config: &SynthConfig) -> Result<DenseDataset> {
    let SynthConfig {
        k,
        n,
        clusters,
        noise,
        seed,
        ..
    } = *config;
    if clusters == 0 || k < clusters {
        return Err(Error::Config(format!("need k >= clusters >= 1, got k = {k}, clusters = {clusters}")));
    }
    if n == 0 {
        return Err(Error::Config("n must be positive".into()));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config(format!("noise must be a finite non-negative number, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let centers: Vec<(f64, f64)> = (0..clusters)
        .map(|_| (rng.random_range(34.0..34.3), rng.random_range(-118.5..-118.2)))
        .collect();
    let profiles: Vec<ClusterProfile> = (0..clusters).map(|_| ClusterProfile::draw(&mut rng)).collect();
    let mut coords = Array2::zeros((k, 2));
    for j in 0..k {
        let (lat, lon) = centers[cluster_of(j, clusters)];
        coords[[j, 0]] = lat + 0.01 * unit.sample(&mut rng);
        coords[[j, 1]] = lon + 0.01 * unit.sample(&mut rng);
    }

    let mut global = noise * unit.sample(&mut rng);
    let mut local: Vec<f64> = (0..clusters).map(|_| noise * unit.sample(&mut rng)).collect();
    let mut readings = Array2::zeros((n, k));
    for t in 0..n {
        if t > 0 {
            global = ar_step(&mut rng, global, GLOBAL_PHI, noise);
            for c in local.iter_mut() {
                *c = ar_step(&mut rng, *c, CLUSTER_PHI, noise);
            }
        }
        let ts = config.start_time
            + chrono::Duration::minutes(t as i64 * config.interval_minutes as i64);
        let base: Vec<f64> = profiles.iter().map(|p| p.speed(ts)).collect();
        for j in 0..k {
            let c = cluster_of(j, clusters);
            let jitter = SENSOR_NOISE_SHARE * noise * unit.sample(&mut rng);
            readings[[t, j]] = (base[c] + global + local[c] + jitter).max(0.0);
        }
    }
    let ids = (0..k).map(|j| format!("synth-{j:04}")).collect();
    DenseDataset::new(readings, ids, coords, config.start_time, config.interval_minutes)
}
