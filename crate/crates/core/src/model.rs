//! The sparse reconstruction model.
//!
//! A window's first timestamp bootstraps a hidden state of `|V|` latent
//! nodes. Each observation is routed to one node by a learned assignment
//! over its position and contributes a residual row computed from the
//! observation and the previous state. The accumulated per-step states are
//! linked by a self-adaptive propagation matrix, rolled one step forward by
//! the inner graph network (or averaged) and decoded at arbitrary query
//! positions.
//!
//! All operations are batch-aware: a batch of `B` windows is processed as
//! stacked `[B·|V| × d_e]` hidden states.

use ndarray::Array2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::datasets::{Observation, SampleWindow, TimeFeatures, OBSERVATION_FEATURES};
use crate::error::{Error, Result};
use crate::params::{Linear, ParamStore};
use crate::stgnn::{average_aggregate, InnerFactor, Stgnn, StgnnConfig};

/// How per-step residuals are chained into hidden states.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Recurrence {
    /// `X_i = X̄ + Σ_{j<i} X_j + Σ_o enc(o, X_{i−1})`.
    #[default]
    Literal,
    /// `X_i = X_{i−1} + Σ_o enc(o, X_{i−1})` with `X_{−1} = X̄`.
    Incremental,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssignmentMode {
    /// Draw the node index from the softmax distribution.
    Sampled,
    /// Take the most probable node.
    Argmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_nodes: usize,
    pub embed_dim: usize,
    pub lead_time: usize,
    pub stgnn_factor: InnerFactor,
    pub recurrence: Recurrence,
    pub train_assignment: AssignmentMode,
    pub eval_assignment: AssignmentMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_nodes: 10,
            embed_dim: 32,
            lead_time: 12,
            stgnn_factor: InnerFactor::Scaled(0.5),
            recurrence: Recurrence::Literal,
            train_assignment: AssignmentMode::Sampled,
            eval_assignment: AssignmentMode::Argmax,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_nodes == 0 {
            return Err(Error::Config("num_nodes must be at least 1".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be at least 1".into()));
        }
        if self.lead_time == 0 {
            return Err(Error::Config("lead_time must be at least 1".into()));
        }
        Ok(())
    }

    pub fn stgnn(&self) -> StgnnConfig {
        StgnnConfig::with_factor(self.stgnn_factor)
    }
}

/// Width of the decoder's hidden layers.
pub const DECODER_WIDTHS: [usize; 2] = [256, 128];

/// Observations of one timestep gathered across a batch.
#[derive(Clone, Debug, Default)]
pub struct StepBatch {
    /// Batch index of each observation's window.
    pub owner: Vec<usize>,
    /// `[n × 5]` observation features.
    pub features: Array2<f64>,
    /// `[n × 2]` normalized positions.
    pub positions: Array2<f64>,
}

impl StepBatch {
    pub fn from_observations<'a>(items: impl IntoIterator<Item = (usize, &'a Observation)>) -> Self {
        let mut owner = Vec::new();
        let mut feats = Vec::new();
        let mut pos = Vec::new();
        for (b, o) in items {
            owner.push(b);
            feats.extend_from_slice(&o.features());
            pos.extend_from_slice(&[o.position.lat, o.position.lon]);
        }
        let n = owner.len();
        Self {
            owner,
            features: Array2::from_shape_vec((n, OBSERVATION_FEATURES), feats).expect("feature width"),
            positions: Array2::from_shape_vec((n, 2), pos).expect("position width"),
        }
    }

    pub fn len(&self) -> usize {
        self.owner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.owner.is_empty()
    }
}

/// Gathers step `i` of every window into one [`StepBatch`] per step.
pub fn batch_steps(windows: &[&SampleWindow], lead_time: usize) -> Result<Vec<StepBatch>> {
    for w in windows {
        if w.steps.len() != lead_time {
            return Err(Error::Shape(format!(
                "window {} has {} observation steps, model expects {lead_time}",
                w.start,
                w.steps.len()
            )));
        }
    }
    Ok((0..lead_time)
        .map(|i| {
            StepBatch::from_observations(
                windows
                    .iter()
                    .enumerate()
                    .flat_map(|(b, w)| w.steps[i].iter().map(move |o| (b, o))),
            )
        })
        .collect())
}

/// Intermediate results of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub context: Var,
    pub hidden: Vec<Var>,
    pub laplacian: Var,
    pub future: Var,
    /// `[Σ|Q| × 1]` normalized predictions, window-major.
    pub predictions: Var,
}

#[derive(Clone, Debug)]
struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut R) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.fc{}", i + 1), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    /// ReLU between layers, none after the last.
    fn forward(&self, g: &mut Graph, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x);
            if i < last {
                x = g.relu(x);
            }
        }
        x
    }
}

/// Parameter bundle and forward pass of the reconstruction model.
#[derive(Clone, Debug)]
pub struct SusterModel {
    config: ModelConfig,
    store: ParamStore,
    context: Mlp,
    inform: Mlp,
    sample: Mlp,
    decoder_in: Linear,
    decoder_hidden: Linear,
    decoder_out: Linear,
    inner: Option<Stgnn>,
}

impl SusterModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let v = config.num_nodes;
        let d = config.embed_dim;
        let flat = v * d;
        let context = Mlp::new(&mut store, "context", &[2, d, flat], &mut rng);
        let inform = Mlp::new(
            &mut store,
            "inform",
            &[flat + OBSERVATION_FEATURES, 2 * d, 2 * d, d],
            &mut rng,
        );
        let sample = Mlp::new(&mut store, "sample", &[2, v, v], &mut rng);
        let [w1, w2] = DECODER_WIDTHS;
        let decoder_in = Linear::new(&mut store, "decoder.fc1", flat + 2, w1, &mut rng);
        let decoder_hidden = Linear::new(&mut store, "decoder.fc2", w1, w2, &mut rng);
        let decoder_out = Linear::new(&mut store, "decoder.fc3", w2, 1, &mut rng);
        let inner = match config.stgnn_factor {
            InnerFactor::Average => None,
            InnerFactor::Scaled(_) => Some(Stgnn::new(
                &mut store,
                "stgnn",
                &config.stgnn(),
                v,
                d,
                d,
                config.lead_time,
                &mut rng,
            )?),
        };
        Ok(Self {
            config,
            store,
            context,
            inform,
            sample,
            decoder_in,
            decoder_hidden,
            decoder_out,
            inner,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn nodes(&self) -> usize {
        self.config.num_nodes
    }

    fn dim(&self) -> usize {
        self.config.embed_dim
    }

    /// `C_θ`: context `(time_of_day, day_of_week)` of each window →
    /// `[B·|V| × d_e]` initial state.
    pub fn context_init(&self, g: &mut Graph, times: &[TimeFeatures]) -> Var {
        let b = times.len();
        let ctx = Array2::from_shape_fn((b, 2), |(i, j)| times[i].context()[j]);
        let x = g.input(ctx);
        let flat = self.context.forward(g, x);
        g.reshape(flat, b * self.nodes(), self.dim())
    }

    /// Node-selection distribution `softmax(MLP(s))`, `[n × |V|]`.
    pub fn assignment_probs(&self, g: &mut Graph, positions: Var) -> Var {
        let logits = self.sample.forward(g, positions);
        g.softmax_rows(logits)
    }

    /// One-hot node choice per position with a straight-through backward
    /// into the softmax probabilities.
    pub fn assign(&self, g: &mut Graph, positions: Var, mode: AssignmentMode, rng: &mut dyn RngCore) -> Var {
        let probs = self.assignment_probs(g, positions);
        let hard = one_hot(g.value(probs), mode, rng);
        g.straight_through(probs, hard)
    }

    /// `inf_θ(o, X)`: `[n × d_e]` residual vectors. `prev_flat` is the
    /// `[B × |V|·d_e]` flattened state, `owner` selects each row's window.
    pub fn inform(&self, g: &mut Graph, prev_flat: Var, owner: &[usize], features: Var) -> Var {
        let rows = g.gather_rows(prev_flat, owner.to_vec());
        let input = g.concat_cols(&[rows, features]);
        self.inform.forward(g, input)
    }

    /// Sum of `assign(s)ᵀ · inf(o, X_prev)` over a step's observations,
    /// as a `[B·|V| × d_e]` residual.
    pub fn encode_step(
        &self,
        g: &mut Graph,
        step: &StepBatch,
        prev: Var,
        batch: usize,
        mode: AssignmentMode,
        rng: &mut dyn RngCore,
    ) -> Option<Var> {
        if step.is_empty() {
            return None;
        }
        let prev_flat = g.reshape(prev, batch, self.nodes() * self.dim());
        let feats = g.input(step.features.clone());
        let info = self.inform(g, prev_flat, &step.owner, feats);
        let pos = g.input(step.positions.clone());
        let assign = self.assign(g, pos, mode, rng);
        Some(g.scatter_outer(assign, info, step.owner.clone(), batch))
    }

    /// Hidden-state sequence `(X_0 … X_{m−1})` from the context and the
    /// per-step observations. Observations within a step are encoded
    /// independently against the previous state and summed.
    pub fn accumulate(
        &self,
        g: &mut Graph,
        context: Var,
        steps: &[StepBatch],
        batch: usize,
        mode: AssignmentMode,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Var>> {
        if steps.len() != self.config.lead_time {
            return Err(Error::Shape(format!(
                "{} observation steps, expected {}",
                steps.len(),
                self.config.lead_time
            )));
        }
        let mut states: Vec<Var> = Vec::with_capacity(steps.len());
        let mut prefix: Option<Var> = None;
        for (i, step) in steps.iter().enumerate() {
            let prev = if i == 0 { context } else { states[i - 1] };
            let delta = self.encode_step(g, step, prev, batch, mode, rng);
            let base = match self.config.recurrence {
                Recurrence::Literal => match prefix {
                    Some(p) => g.add(context, p),
                    None => context,
                },
                Recurrence::Incremental => prev,
            };
            let x = match delta {
                Some(d) => g.add(base, d),
                None => base,
            };
            if self.config.recurrence == Recurrence::Literal {
                prefix = Some(match prefix {
                    Some(p) => g.add(p, x),
                    None => x,
                });
            }
            states.push(x);
        }
        Ok(states)
    }

    /// `softmax(ReLU(X Xᵀ))` per window, stacked `[B·|V| × |V|]`.
    pub fn laplacian(&self, g: &mut Graph, last: Var) -> Var {
        laplacian(g, last, self.nodes())
    }

    /// Next hidden state from the sequence: inner graph network or mean.
    pub fn predict_graph(&self, g: &mut Graph, sequence: &[Var], lap: Var, batch: usize) -> Result<Var> {
        match &self.inner {
            None => average_aggregate(g, sequence),
            Some(net) => {
                let stacked = g.concat_rows(sequence);
                net.forward(g, stacked, lap, batch)
            }
        }
    }

    /// `dec_θ(X_m, s)` for every query; `owner[q]` names the query's window.
    /// Returns `[n_queries × 1]`.
    pub fn decode(&self, g: &mut Graph, future: Var, batch: usize, queries: &Array2<f64>, owner: &[usize]) -> Var {
        let flat_dim = self.nodes() * self.dim();
        let flat = g.reshape(future, batch, flat_dim);
        // First layer over concat(X, s), evaluated as X·W_x + s·W_s + b so
        // the state part is computed once per window.
        let w = g.param(self.decoder_in.weight);
        let b = g.param(self.decoder_in.bias);
        let w_state = g.slice_rows(w, 0, flat_dim);
        let w_pos = g.slice_rows(w, flat_dim, 2);
        let per_window = g.matmul(flat, w_state);
        let per_query = g.gather_rows(per_window, owner.to_vec());
        let q = g.input(queries.clone());
        let pos = g.matmul(q, w_pos);
        let h = g.add(per_query, pos);
        let h = g.add_row(h, b);
        let h = g.relu(h);
        let h = self.decoder_hidden.forward(g, h);
        self.decoder_out.forward(g, h)
    }

    /// Full pass over a batch of windows.
    pub fn forward(
        &self,
        g: &mut Graph,
        windows: &[&SampleWindow],
        mode: AssignmentMode,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardTrace> {
        if windows.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let batch = windows.len();
        let times: Vec<TimeFeatures> = windows.iter().map(|w| w.context()).collect();
        let steps = batch_steps(windows, self.config.lead_time)?;
        let context = self.context_init(g, &times);
        let hidden = self.accumulate(g, context, &steps, batch, mode, rng)?;
        let last = *hidden.last().expect("lead_time >= 1");
        if g.value(last).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "hidden state",
                detail: format!("windows starting at {}", windows[0].start),
            });
        }
        let laplacian = self.laplacian(g, last);
        let future = self.predict_graph(g, &hidden, laplacian, batch)?;
        let (queries, owner) = stack_queries(windows);
        let predictions = self.decode(g, future, batch, &queries, &owner);
        Ok(ForwardTrace {
            context,
            hidden,
            laplacian,
            future,
            predictions,
        })
    }

    /// Frozen-model inference for one window, normalized units.
    pub fn predict(&self, window: &SampleWindow) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trace = self.forward(&mut g, &[window], self.config.eval_assignment, &mut rng)?;
        Ok(g.value(trace.predictions).iter().copied().collect())
    }
}

/// Query positions of all windows stacked window-major, with owners.
pub fn stack_queries(windows: &[&SampleWindow]) -> (Array2<f64>, Vec<usize>) {
    let total: usize = windows.iter().map(|w| w.query_locations.len()).sum();
    let mut data = Vec::with_capacity(total * 2);
    let mut owner = Vec::with_capacity(total);
    for (b, w) in windows.iter().enumerate() {
        for p in w.query_locations.iter() {
            data.extend_from_slice(&[p.lat, p.lon]);
            owner.push(b);
        }
    }
    (Array2::from_shape_vec((total, 2), data).expect("two columns"), owner)
}

/// `softmax(ReLU(X Xᵀ))` over each `nodes`-row block of `last`.
pub fn laplacian(g: &mut Graph, last: Var, nodes: usize) -> Var {
    let gram = g.block_gram(last, nodes);
    let clamped = g.relu(gram);
    g.softmax_rows(clamped)
}

/// One-hot rows from a probability matrix.
pub fn one_hot(probs: &Array2<f64>, mode: AssignmentMode, rng: &mut dyn RngCore) -> Array2<f64> {
    let mut out = Array2::zeros(probs.dim());
    for (i, row) in probs.rows().into_iter().enumerate() {
        let idx = match mode {
            AssignmentMode::Argmax => row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &p)| if p > best.1 { (j, p) } else { best })
                .0,
            AssignmentMode::Sampled => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = row.len() - 1;
                for (j, &p) in row.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        chosen = j;
                        break;
                    }
                }
                chosen
            }
        };
        out[[i, idx]] = 1.0;
    }
    out
}
