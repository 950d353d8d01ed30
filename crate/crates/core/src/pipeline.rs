//! Dataset preparation and single/multi-seed experiment runs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{CarryForward, Climatology, StgcnBaseline};
use crate::datasets::{
    build_features, load_dense_dataset, sparsify, synth_generate, window, DenseDataset, FeatureTable,
    SampleWindow, SparseMask, SplitRanges, SplitSpec, SynthConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{MetricAccumulator, Metrics};
use crate::model::{ModelConfig, SusterModel};
use crate::training::{evaluate, train, Checkpoint, EpochRecord, Forecaster, ModelSpec, TrainConfig};

pub const DEFAULT_DROPOUTS: [f64; 7] = [0.10, 0.80, 0.90, 0.95, 0.99, 0.995, 0.999];

/// Where the dense readings come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Directory holding the dataset files; relative paths resolve against
    /// the data root.
    Path(PathBuf),
    Synth(SynthConfig),
}

impl DatasetSource {
    pub fn load(&self, data_root: Option<&Path>) -> Result<DenseDataset> {
        match self {
            DatasetSource::Synth(cfg) => synth_generate(cfg),
            DatasetSource::Path(p) => match data_root {
                Some(root) if p.is_relative() => load_dense_dataset(root.join(p)),
                _ => load_dense_dataset(p),
            },
        }
    }
}

/// Complete description of an experiment; persisted beside every result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default = "default_dropouts")]
    pub dropouts: Vec<f64>,
    /// Seed of the sparsity mask, shared by all runs on a dataset.
    #[serde(default)]
    pub mask_seed: u64,
    /// Models compared by sweeps; `train` uses the first.
    #[serde(default = "default_models")]
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default = "default_runs")]
    pub n_runs: usize,
    /// First run seed; run `i` uses `seed + i`.
    #[serde(default)]
    pub seed: u64,
}

fn default_dropouts() -> Vec<f64> {
    DEFAULT_DROPOUTS.to_vec()
}

fn default_models() -> Vec<ModelSpec> {
    vec![ModelSpec::Suster(ModelConfig::default())]
}

fn default_runs() -> usize {
    5
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetSource, model: ModelSpec) -> Self {
        Self {
            dataset,
            dropouts: default_dropouts(),
            mask_seed: 0,
            models: vec![model],
            train: TrainConfig::default(),
            split: SplitSpec::default(),
            n_runs: default_runs(),
            seed: 0,
        }
    }

    /// Every problem found, each prefixed with the offending key.
    pub fn problems(&self) -> Vec<String> {
        let detail = |e: Error| match e {
            Error::Config(msg) => msg,
            other => other.to_string(),
        };
        let mut out = Vec::new();
        for (i, p) in self.dropouts.iter().enumerate() {
            if !(0.0..=1.0).contains(p) {
                out.push(format!("dropouts[{i}]: {p} is outside [0, 1]"));
            }
        }
        if self.models.is_empty() {
            out.push("models: at least one model is required".into());
        }
        for (i, m) in self.models.iter().enumerate() {
            let res = match m {
                ModelSpec::Suster(c) => c.validate(),
                ModelSpec::StgcnBaseline(c) => c.validate(),
            };
            if let Err(e) = res {
                out.push(format!("models[{i}]: {}", detail(e)));
            }
        }
        if let Err(e) = self.train.validate() {
            out.push(format!("train: {}", detail(e)));
        }
        if let Err(e) = self.split.validate() {
            out.push(format!("split: {}", detail(e)));
        }
        if self.n_runs == 0 {
            out.push("n_runs: must be at least 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

pub fn lead_time(spec: &ModelSpec) -> usize {
    match spec {
        ModelSpec::Suster(c) => c.lead_time,
        ModelSpec::StgcnBaseline(c) => c.lead_time,
    }
}

/// A sparsified dataset cut into windows and splits.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: DenseDataset,
    pub mask: SparseMask,
    pub features: FeatureTable,
    pub windows: Vec<SampleWindow>,
    pub ranges: SplitRanges,
    /// Leading dataset rows used for normalization and naive baselines.
    pub train_rows: usize,
}

impl Prepared {
    pub fn new(dataset: DenseDataset, dropout: f64, mask_seed: u64, lead_time: usize, split: &SplitSpec) -> Result<Self> {
        let mask = sparsify(&dataset, dropout, mask_seed)?;
        Self::with_mask(dataset, mask, lead_time, split)
    }

    pub fn with_mask(dataset: DenseDataset, mask: SparseMask, lead_time: usize, split: &SplitSpec) -> Result<Self> {
        let train_rows = split.train_rows(dataset.n(), lead_time)?;
        let features = build_features(&dataset, train_rows)?;
        let windows = window(&dataset, &mask, &features, lead_time)?;
        let ranges = split.ranges(windows.len())?;
        Ok(Self {
            dataset,
            mask,
            features,
            windows,
            ranges,
            train_rows,
        })
    }

    pub fn train(&self) -> &[SampleWindow] {
        &self.windows[self.ranges.train.clone()]
    }

    pub fn val(&self) -> &[SampleWindow] {
        &self.windows[self.ranges.val.clone()]
    }

    pub fn test(&self) -> &[SampleWindow] {
        &self.windows[self.ranges.test.clone()]
    }

    pub fn split(&self, name: &str) -> Option<&[SampleWindow]> {
        match name {
            "train" => Some(self.train()),
            "val" => Some(self.val()),
            "test" => Some(self.test()),
            _ => None,
        }
    }

    pub fn build_model(&self, spec: &ModelSpec, seed: u64) -> Result<Forecaster> {
        Ok(match spec {
            ModelSpec::Suster(cfg) => Forecaster::Suster(SusterModel::new(cfg.clone(), seed)?),
            ModelSpec::StgcnBaseline(cfg) => Forecaster::Stgcn(StgcnBaseline::new(
                cfg.clone(),
                self.dataset.sensor_coords(),
                self.features.normalizer,
                seed,
            )?),
        })
    }

    /// Test metrics of the climatology and carry-forward predictors.
    pub fn naive_metrics(&self, windows: &[SampleWindow]) -> Result<NaiveMetrics> {
        let clim = Climatology::fit(&self.dataset, &self.features, self.train_rows);
        let carry = CarryForward::fit(&self.dataset, self.features.normalizer, self.train_rows);
        Ok(NaiveMetrics {
            climatology: score(windows, |w| clim.predict(w))?,
            carry_forward: score(windows, |w| carry.predict(w))?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NaiveMetrics {
    pub climatology: Metrics,
    pub carry_forward: Metrics,
}

/// Metrics of a raw-unit predictor over windows.
pub fn score(windows: &[SampleWindow], mut predict: impl FnMut(&SampleWindow) -> Vec<f64>) -> Result<Metrics> {
    let mut acc = MetricAccumulator::default();
    for w in windows {
        acc.extend(&predict(w), &w.targets);
    }
    acc.finish()
}

/// Outcome of training and scoring one model with one seed.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub label: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub val: Metrics,
    pub test: Metrics,
    pub seconds: f64,
    pub checkpoint: Checkpoint,
}

pub fn run_single(prepared: &Prepared, spec: &ModelSpec, train_config: &TrainConfig, seed: u64) -> Result<RunResult> {
    let started = Instant::now();
    let normalizer = prepared.features.normalizer;
    let mut model = prepared.build_model(spec, seed)?;
    let outcome = train(&mut model, prepared.train(), prepared.val(), &normalizer, train_config, seed)?;
    let test = evaluate(&model, prepared.test(), &normalizer, train_config.eval_batch_size)?;
    Ok(RunResult {
        label: model.label(),
        seed,
        best_epoch: outcome.best_epoch,
        history: outcome.history,
        val: outcome.best_val,
        test,
        seconds: started.elapsed().as_secs_f64(),
        checkpoint: Checkpoint::capture(&model, normalizer),
    })
}

/// Runs seeds `base_seed..base_seed + n_runs`.
pub fn multirun(
    prepared: &Prepared,
    spec: &ModelSpec,
    train_config: &TrainConfig,
    base_seed: u64,
    n_runs: usize,
) -> Result<Vec<RunResult>> {
    if n_runs == 0 {
        return Err(Error::Config("n_runs must be at least 1".into()));
    }
    (0..n_runs as u64)
        .map(|i| run_single(prepared, spec, train_config, base_seed + i))
        .collect()
}
