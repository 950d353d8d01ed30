//! Optimizer loop, evaluation and checkpoints shared by the reconstruction
//! model and the dense baseline.

use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::baselines::{BaselineConfig, StgcnBaseline};
use crate::datasets::{Normalizer, SampleWindow};
use crate::error::{Error, Result};
use crate::metrics::{MetricAccumulator, Metrics};
use crate::model::{ModelConfig, SusterModel};
use crate::params::{ParamStore, TensorRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub shuffle: bool,
    /// Batch size used for validation/test scoring; does not affect results.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            weight_decay: 1e-5,
            batch_size: 32,
            epochs: 50,
            shuffle: true,
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Whether a pass is part of optimization (sampled assignment) or scoring.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// A trainable predictor of next-step normalized speeds at query positions.
#[derive(Clone, Debug)]
pub enum Forecaster {
    Suster(SusterModel),
    Stgcn(StgcnBaseline),
}

/// Model choice plus its hyperparameters, as persisted in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "snake_case")]
pub enum ModelSpec {
    Suster(ModelConfig),
    StgcnBaseline(BaselineConfig),
}

impl Forecaster {
    pub fn params(&self) -> &ParamStore {
        match self {
            Forecaster::Suster(m) => m.params(),
            Forecaster::Stgcn(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Forecaster::Suster(m) => m.params_mut(),
            Forecaster::Stgcn(m) => m.params_mut(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Forecaster::Suster(_) => "suster".into(),
            Forecaster::Stgcn(m) => m.config().label(),
        }
    }

    pub fn spec(&self) -> ModelSpec {
        match self {
            Forecaster::Suster(m) => ModelSpec::Suster(m.config().clone()),
            Forecaster::Stgcn(m) => ModelSpec::StgcnBaseline(m.config().clone()),
        }
    }

    /// `[Σ|Q| × 1]` normalized predictions, window-major.
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        windows: &[&SampleWindow],
        phase: Phase,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        match self {
            Forecaster::Suster(m) => {
                let mode = match phase {
                    Phase::Train => m.config().train_assignment,
                    Phase::Eval => m.config().eval_assignment,
                };
                Ok(m.forward(g, windows, mode, rng)?.predictions)
            }
            Forecaster::Stgcn(m) => m.forward(g, windows, rng),
        }
    }
}

/// Normalized targets of a batch, stacked like the predictions.
pub fn batch_targets(windows: &[&SampleWindow], normalizer: &Normalizer) -> Array2<f64> {
    let values: Vec<f64> = windows
        .iter()
        .flat_map(|w| w.targets.iter().map(|&y| normalizer.normalize(y)))
        .collect();
    let n = values.len();
    Array2::from_shape_vec((n, 1), values).expect("column vector")
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, learning_rate: f64, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|(_, v)| Array2::zeros(v.dim())).collect::<Vec<_>>();
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// `p ← p − lr·(m̂ / (√v̂ + ε) + λ·p)`. Parameters without a gradient in
    /// this step are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Array2<f64>>]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let p = params.value_mut(id);
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            match grads.get(i).and_then(Option::as_ref) {
                Some(g) => {
                    m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
                    v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
                }
                None => {
                    m.mapv_inplace(|m| self.beta1 * m);
                    v.mapv_inplace(|v| self.beta2 * v);
                }
            }
            let (lr, wd, eps) = (self.learning_rate, self.weight_decay, self.eps);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let update = (m / c1) / ((v / c2).sqrt() + eps) + wd * *p;
                *p -= lr * update;
            });
        }
    }
}

/// One row of the training history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss, denormalized to speed units.
    pub train_mae: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub val_mape: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val: Metrics,
    pub history: Vec<EpochRecord>,
}

/// 1-based index of the first minimum.
pub fn best_epoch(val_mae: &[f64]) -> Option<usize> {
    val_mae
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, b)) if b <= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i + 1)
}

/// Normalized-space MAE of a batch and its graph.
pub fn batch_loss<'p>(
    model: &'p Forecaster,
    windows: &[&SampleWindow],
    normalizer: &Normalizer,
    phase: Phase,
    rng: &mut ChaCha8Rng,
) -> Result<(Graph<'p>, Var)> {
    let mut g = Graph::new(model.params());
    let preds = model.forward_batch(&mut g, windows, phase, rng)?;
    let targets = batch_targets(windows, normalizer);
    let loss = g.mean_abs_error(preds, targets);
    Ok((g, loss))
}

/// Denormalized predictions for every window, in window order.
pub fn predict_all(
    model: &Forecaster,
    windows: &[SampleWindow],
    normalizer: &Normalizer,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&SampleWindow> = chunk.iter().collect();
        let mut g = Graph::new(model.params());
        let preds = model.forward_batch(&mut g, &refs, Phase::Eval, &mut rng)?;
        let values = g.value(preds);
        let mut offset = 0;
        for w in chunk {
            let q = w.query_locations.len();
            out.push(
                (offset..offset + q)
                    .map(|i| normalizer.denormalize(values[[i, 0]]))
                    .collect(),
            );
            offset += q;
        }
    }
    Ok(out)
}

/// MAE / RMSE / MAPE of a frozen model on a split, in speed units.
pub fn evaluate(
    model: &Forecaster,
    windows: &[SampleWindow],
    normalizer: &Normalizer,
    batch_size: usize,
) -> Result<Metrics> {
    if windows.is_empty() {
        return Err(Error::EmptySplit("evaluation"));
    }
    let preds = predict_all(model, windows, normalizer, batch_size)?;
    let mut acc = MetricAccumulator::default();
    for (p, w) in preds.iter().zip(windows) {
        acc.extend(p, &w.targets);
    }
    acc.finish()
}

/// Trains for a fixed number of epochs and leaves the model holding the
/// parameters of the epoch with the lowest validation MAE.
pub fn train(
    model: &mut Forecaster,
    train_split: &[SampleWindow],
    val_split: &[SampleWindow],
    normalizer: &Normalizer,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_split.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if val_split.is_empty() {
        return Err(Error::EmptySplit("val"));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a551_6e00_0001);
    let mut adam = Adam::new(model.params(), config.learning_rate, config.weight_decay);
    let mut order: Vec<usize> = (0..train_split.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Metrics, ParamStore)> = None;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        if config.shuffle {
            order.shuffle(&mut order_rng);
        }
        let mut loss_sum = 0.0;
        let mut loss_weight = 0usize;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let windows: Vec<&SampleWindow> = idx.iter().map(|&i| &train_split[i]).collect();
            let (grads, loss, count) = {
                let (g, loss_var) = batch_loss(model, &windows, normalizer, Phase::Train, &mut draw_rng)
                    .map_err(|e| match e {
                        Error::NonFinite { what, detail } => Error::NonFinite {
                            what,
                            detail: format!("epoch {epoch}, batch {b}: {detail}"),
                        },
                        other => other,
                    })?;
                let loss = g.scalar(loss_var);
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        what: "loss",
                        detail: format!("epoch {epoch}, batch {b}"),
                    });
                }
                let grads = g.backward(loss_var);
                let count: usize = windows.iter().map(|w| w.targets.len()).sum();
                (g.param_grads(&grads), loss, count)
            };
            adam.step(model.params_mut(), &grads);
            loss_sum += loss * count as f64;
            loss_weight += count;
        }
        let val = evaluate(model, val_split, normalizer, config.eval_batch_size)?;
        history.push(EpochRecord {
            epoch,
            train_mae: loss_sum / loss_weight.max(1) as f64 * normalizer.std,
            val_mae: val.mae,
            val_rmse: val.rmse,
            val_mape: val.mape,
            seconds: started.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|(_, mae, _, _)| val.mae < *mae) {
            best = Some((epoch, val.mae, val, model.params().clone()));
        }
    }
    let (best_epoch, _, best_val, params) = best.expect("at least one epoch");
    *model.params_mut() = params;
    Ok(TrainOutcome {
        best_epoch,
        best_val,
        history,
    })
}

pub const CHECKPOINT_FORMAT: &str = "suster-checkpoint-v1";

/// On-disk model: spec, normalizer, fixed matrices and trained tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub model: ModelSpec,
    pub normalizer: Normalizer,
    /// Non-trainable matrices (the baseline's propagation matrix).
    #[serde(default)]
    pub constants: Vec<TensorRecord>,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn capture(model: &Forecaster, normalizer: Normalizer) -> Self {
        let constants = match model {
            Forecaster::Suster(_) => Vec::new(),
            Forecaster::Stgcn(m) => vec![TensorRecord {
                name: "laplacian".into(),
                shape: [m.laplacian().nrows(), m.laplacian().ncols()],
                data: m.laplacian().iter().copied().collect(),
            }],
        };
        Self {
            format: CHECKPOINT_FORMAT.into(),
            model: model.spec(),
            normalizer,
            constants,
            tensors: model.params().to_archive(),
        }
    }

    /// Rebuilds the model and validates every tensor shape.
    pub fn restore(&self) -> Result<Forecaster> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", self.format)));
        }
        let mut model = match &self.model {
            ModelSpec::Suster(cfg) => Forecaster::Suster(SusterModel::new(cfg.clone(), 0)?),
            ModelSpec::StgcnBaseline(cfg) => {
                let rec = self
                    .constants
                    .iter()
                    .find(|r| r.name == "laplacian")
                    .ok_or_else(|| Error::Checkpoint("baseline checkpoint lacks its laplacian".into()))?;
                let [r, c] = rec.shape;
                if r != c || rec.data.len() != r * c {
                    return Err(Error::Checkpoint(format!("laplacian shape {:?} is invalid", rec.shape)));
                }
                let lap = Array2::from_shape_vec((r, c), rec.data.clone()).expect("checked shape");
                Forecaster::Stgcn(StgcnBaseline::with_laplacian(cfg.clone(), lap, self.normalizer, 0)?)
            }
        };
        model.params_mut().load_archive(&self.tensors)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}
