//! Dense STGCN baseline with its two fairness modifications (random
//! adjacency, per-batch sensor permutation) and the naive reference
//! predictors used as oracles.

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::datasets::{DenseDataset, FeatureTable, Normalizer, SampleWindow};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::stgnn::{InnerFactor, Stgnn, StgnnConfig};

/// Input channels per sensor and step: speed, time of day, day of week,
/// latitude, longitude.
pub const BASELINE_CHANNELS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub use_random_adjacency: bool,
    pub use_permutation: bool,
    pub adjacency_seed: u64,
    pub factor: InnerFactor,
    pub lead_time: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            use_random_adjacency: false,
            use_permutation: false,
            adjacency_seed: 0,
            factor: InnerFactor::Scaled(1.0),
            lead_time: 12,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.factor == InnerFactor::Average {
            return Err(Error::Config("the dense baseline requires a graph network factor".into()));
        }
        if self.lead_time == 0 {
            return Err(Error::Config("lead_time must be at least 1".into()));
        }
        Ok(())
    }

    /// Report label: `stgcn`, `stgcn_adj`, `stgcn_perm` or `stgcn_adj_perm`.
    pub fn label(&self) -> String {
        let mut name = String::from("stgcn");
        if self.use_random_adjacency {
            name.push_str("_adj");
        }
        if self.use_permutation {
            name.push_str("_perm");
        }
        name
    }
}

/// `D^{-1/2} A D^{-1/2}` with `D` the row sums of `A`.
pub fn normalize_adjacency(adjacency: &Array2<f64>) -> Array2<f64> {
    let degree: Vec<f64> = adjacency.rows().into_iter().map(|r| r.sum()).collect();
    let inv: Vec<f64> = degree
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    Array2::from_shape_fn(adjacency.dim(), |(i, j)| inv[i] * adjacency[[i, j]] * inv[j])
}

/// Clamps negative weights to zero, adds self-loops and normalizes.
pub fn clamp_and_normalize(raw: &Array2<f64>) -> Array2<f64> {
    let mut a = raw.mapv(|v| v.max(0.0));
    for i in 0..a.nrows() {
        a[[i, i]] += 1.0;
    }
    normalize_adjacency(&a)
}

/// Random `N(0, 1)` adjacency, drawn row-major from ChaCha8 seeded with
/// `seed`, then clamped, self-looped and normalized.
pub fn random_adjacency(k: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = Array2::from_shape_fn((k, k), |_| StandardNormal.sample(&mut rng));
    clamp_and_normalize(&raw)
}

/// Thresholded Gaussian kernel over pairwise sensor distances (degrees),
/// bandwidth = standard deviation of the distances, weights below 0.1
/// dropped; then self-looped and normalized. Stands in for a road graph.
pub fn distance_adjacency(coords: &Array2<f64>) -> Array2<f64> {
    let k = coords.nrows();
    let dist = Array2::from_shape_fn((k, k), |(i, j)| {
        let dl = coords[[i, 0]] - coords[[j, 0]];
        let dn = coords[[i, 1]] - coords[[j, 1]];
        (dl * dl + dn * dn).sqrt()
    });
    let n = (k * k) as f64;
    let mean = dist.sum() / n;
    let sd = (dist.mapv(|d| (d - mean) * (d - mean)).sum() / n).sqrt();
    let raw = dist.mapv(|d| {
        if sd <= 0.0 {
            return 1.0;
        }
        let w = (-(d / sd).powi(2)).exp();
        if w < 0.1 {
            0.0
        } else {
            w
        }
    });
    clamp_and_normalize(&(raw - Array2::<f64>::eye(k)))
}

/// Dense `[m·B·k × channels]` inputs with `[B·k × 1]` targets.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseBatch {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
    pub lead_time: usize,
    pub batch: usize,
    pub sensors: usize,
}

/// Lays a batch of windows out densely. Unobserved readings are filled
/// with `fill` (the normalized value of a zero reading).
pub fn dense_batch(windows: &[&SampleWindow], fill: f64, normalizer: &Normalizer) -> Result<DenseBatch> {
    let batch = windows.len();
    let first = windows.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let m = first.lead_time();
    let k = first.query_locations.len();
    let mut inputs = Array2::zeros((m * batch * k, BASELINE_CHANNELS));
    let mut targets = Array2::zeros((batch * k, 1));
    for (b, w) in windows.iter().enumerate() {
        if w.lead_time() != m || w.query_locations.len() != k || w.targets.len() != k {
            return Err(Error::Shape(format!("window {} does not match batch layout", w.start)));
        }
        for (t, time) in w.step_times.iter().enumerate() {
            for (j, p) in w.query_locations.iter().enumerate() {
                let row = (t * batch + b) * k + j;
                inputs
                    .row_mut(row)
                    .assign(&ndarray::arr1(&[fill, time.time_of_day, time.day_of_week(), p.lat, p.lon]));
            }
            for o in &w.steps[t] {
                if o.sensor >= k {
                    return Err(Error::Shape(format!("observation sensor {} out of range", o.sensor)));
                }
                inputs[[(t * batch + b) * k + o.sensor, 0]] = o.speed;
            }
        }
        for (j, &y) in w.targets.iter().enumerate() {
            targets[[b * k + j, 0]] = normalizer.normalize(y);
        }
    }
    Ok(DenseBatch {
        inputs,
        targets,
        lead_time: m,
        batch,
        sensors: k,
    })
}

/// Reorders sensors inside every `(step, sample)` slab of inputs and every
/// sample of targets: new position `j` takes old sensor `perm[j]`.
pub fn permute_batch(batch: &DenseBatch, perm: &[usize]) -> DenseBatch {
    let k = batch.sensors;
    assert_eq!(perm.len(), k, "permutation length");
    let permute_rows = |m: &Array2<f64>| {
        let slabs = m.nrows() / k;
        let index: Vec<usize> = (0..slabs).flat_map(|q| perm.iter().map(move |&p| q * k + p)).collect();
        m.select(ndarray::Axis(0), &index)
    };
    DenseBatch {
        inputs: permute_rows(&batch.inputs),
        targets: permute_rows(&batch.targets),
        ..batch.clone()
    }
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Full-size STGCN over all sensors.
#[derive(Clone, Debug)]
pub struct StgcnBaseline {
    config: BaselineConfig,
    store: ParamStore,
    net: Stgnn,
    laplacian: Array2<f64>,
    normalizer: Normalizer,
    fill: f64,
}

impl StgcnBaseline {
    /// `coords` are raw sensor coordinates, used for the distance graph when
    /// the random adjacency is off.
    pub fn new(config: BaselineConfig, coords: &Array2<f64>, normalizer: Normalizer, seed: u64) -> Result<Self> {
        let k = coords.nrows();
        if k == 0 {
            return Err(Error::Config("baseline needs at least one sensor".into()));
        }
        config.validate()?;
        let laplacian = if config.use_random_adjacency {
            random_adjacency(k, config.adjacency_seed)
        } else {
            distance_adjacency(coords)
        };
        Self::with_laplacian(config, laplacian, normalizer, seed)
    }

    pub fn with_laplacian(
        config: BaselineConfig,
        laplacian: Array2<f64>,
        normalizer: Normalizer,
        seed: u64,
    ) -> Result<Self> {
        let k = laplacian.nrows();
        if laplacian.dim() != (k, k) {
            return Err(Error::Shape("baseline laplacian must be square".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let stgnn = StgnnConfig::with_factor(config.factor);
        let net = Stgnn::new(&mut store, "stgcn", &stgnn, k, BASELINE_CHANNELS, 1, config.lead_time, &mut rng)?;
        let fill = normalizer.normalize(0.0);
        Ok(Self {
            config,
            store,
            net,
            laplacian,
            normalizer,
            fill,
        })
    }

    pub fn config(&self) -> &BaselineConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn laplacian(&self) -> &Array2<f64> {
        &self.laplacian
    }

    pub fn normalizer(&self) -> Normalizer {
        self.normalizer
    }

    pub fn sensors(&self) -> usize {
        self.laplacian.nrows()
    }

    /// Raw STGCN pass over an already laid-out dense batch. Returns
    /// `[B·k × 1]` normalized predictions in the batch's sensor order.
    pub fn stgcn_forward(&self, g: &mut Graph, batch: &DenseBatch) -> Result<Var> {
        if batch.sensors != self.sensors() {
            return Err(Error::Shape(format!(
                "batch has {} sensors, baseline was built for {}",
                batch.sensors,
                self.sensors()
            )));
        }
        let x = g.input(batch.inputs.clone());
        let lap = g.input(self.laplacian.clone());
        self.net.forward(g, x, lap, batch.batch)
    }

    /// Dense layout, optional per-batch permutation, STGCN, and the inverse
    /// permutation so outputs line up with the windows' target order.
    pub fn forward(&self, g: &mut Graph, windows: &[&SampleWindow], rng: &mut dyn RngCore) -> Result<Var> {
        let dense = dense_batch(windows, self.fill, &self.normalizer)?;
        if !self.config.use_permutation {
            return self.stgcn_forward(g, &dense);
        }
        let k = dense.sensors;
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(rng);
        let permuted = permute_batch(&dense, &perm);
        let out = self.stgcn_forward(g, &permuted)?;
        let inv = inverse_permutation(&perm);
        let index: Vec<usize> = (0..dense.batch).flat_map(|b| inv.iter().map(move |&i| b * k + i)).collect();
        Ok(g.gather_rows(out, index))
    }
}

/// Train-split mean speed per sensor and time-of-day slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Climatology {
    table: Array2<f64>,
}

impl Climatology {
    /// Averages readings of the first `train_rows` timesteps. Slots never
    /// seen fall back to the sensor's overall mean.
    pub fn fit(dataset: &DenseDataset, features: &FeatureTable, train_rows: usize) -> Self {
        let k = dataset.k();
        let slots = features.slots_per_day;
        let mut sum = Array2::<f64>::zeros((k, slots));
        let mut count = Array2::<f64>::zeros((k, slots));
        let rows = train_rows.min(dataset.n());
        for t in 0..rows {
            let slot = features.slots[t];
            for j in 0..k {
                sum[[j, slot]] += dataset.readings()[[t, j]];
                count[[j, slot]] += 1.0;
            }
        }
        let mut table = Array2::zeros((k, slots));
        for j in 0..k {
            let total: f64 = sum.row(j).sum();
            let n: f64 = count.row(j).sum();
            let fallback = if n > 0.0 { total / n } else { 0.0 };
            for s in 0..slots {
                table[[j, s]] = if count[[j, s]] > 0.0 {
                    sum[[j, s]] / count[[j, s]]
                } else {
                    fallback
                };
            }
        }
        Self { table }
    }

    /// Raw-unit prediction for every sensor at the window's target step.
    pub fn predict(&self, window: &SampleWindow) -> Vec<f64> {
        self.table.slice(s![.., window.target_slot]).to_vec()
    }
}

/// Last observed value per sensor within the window, else a global mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CarryForward {
    pub fallback: f64,
    pub normalizer: Normalizer,
}

impl CarryForward {
    pub fn fit(dataset: &DenseDataset, normalizer: Normalizer, train_rows: usize) -> Self {
        let rows = train_rows.min(dataset.n()).max(1);
        let block = dataset.readings().slice(s![..rows, ..]);
        Self {
            fallback: block.sum() / block.len() as f64,
            normalizer,
        }
    }

    pub fn predict(&self, window: &SampleWindow) -> Vec<f64> {
        let mut out = vec![self.fallback; window.query_locations.len()];
        for step in &window.steps {
            for o in step {
                if o.sensor < out.len() {
                    out[o.sensor] = self.normalizer.denormalize(o.speed);
                }
            }
        }
        out
    }
}
