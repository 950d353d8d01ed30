//! Spatio-temporal graph convolution stack used as the inner correlation
//! module, plus the averaging fallback that replaces it when disabled.
//!
//! Signals are laid out as `[T·S·N × C]` matrices: time-major, then sample,
//! then node. One "slab" of `N` rows is the node-feature matrix of a single
//! sample at a single timestep, and one time slice is `S·N` contiguous rows.
//!
//! Each ST-block is gated temporal convolution → Chebyshev-style graph
//! convolution over the supplied propagation matrix → gated temporal
//! convolution → layer normalization over each slab. An output layer
//! convolves over the remaining time steps and a linear head maps to the
//! requested output width.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::params::{fan_in_uniform, Linear, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Size setting of the inner module: a width multiplier, or the averaging
/// fallback with no parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FactorRepr", into = "FactorRepr")]
pub enum InnerFactor {
    Scaled(f64),
    Average,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum FactorRepr {
    Number(f64),
    Name(String),
}

impl TryFrom<FactorRepr> for InnerFactor {
    type Error = String;

    fn try_from(r: FactorRepr) -> std::result::Result<Self, String> {
        match r {
            FactorRepr::Number(f) if f > 0.0 && f.is_finite() => Ok(InnerFactor::Scaled(f)),
            FactorRepr::Number(f) => Err(format!("factor must be positive, got {f}")),
            FactorRepr::Name(s) if s.eq_ignore_ascii_case("none") => Ok(InnerFactor::Average),
            FactorRepr::Name(s) => s
                .parse::<f64>()
                .map_err(|_| format!("factor must be a number or `none`, got `{s}`"))
                .and_then(|f| InnerFactor::try_from(FactorRepr::Number(f))),
        }
    }
}

impl From<InnerFactor> for FactorRepr {
    fn from(f: InnerFactor) -> Self {
        match f {
            InnerFactor::Scaled(v) => FactorRepr::Number(v),
            InnerFactor::Average => FactorRepr::Name("none".into()),
        }
    }
}

impl fmt::Display for InnerFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InnerFactor::Scaled(v) => write!(f, "{v:.2}"),
            InnerFactor::Average => f.write_str("none"),
        }
    }
}

impl std::str::FromStr for InnerFactor {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        InnerFactor::try_from(FactorRepr::Name(s.to_owned()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StgnnConfig {
    pub factor: InnerFactor,
    pub temporal_kernel: usize,
    pub cheb_order: usize,
    pub base_channels: [usize; 3],
    pub num_blocks: usize,
}

impl Default for StgnnConfig {
    fn default() -> Self {
        Self {
            factor: InnerFactor::Scaled(0.5),
            temporal_kernel: 3,
            cheb_order: 2,
            base_channels: [64, 16, 64],
            num_blocks: 2,
        }
    }
}

impl StgnnConfig {
    pub fn with_factor(factor: InnerFactor) -> Self {
        Self {
            factor,
            ..Self::default()
        }
    }

    /// Channel widths after scaling; `None` for the averaging fallback.
    pub fn channels(&self) -> Option<[usize; 3]> {
        match self.factor {
            InnerFactor::Average => None,
            InnerFactor::Scaled(f) => Some(self.base_channels.map(|c| ((f * c as f64).round() as usize).max(1))),
        }
    }

    /// Shortest input sequence the block stack accepts.
    pub fn min_time_steps(&self) -> usize {
        self.num_blocks * 2 * (self.temporal_kernel - 1) + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.temporal_kernel < 1 || self.num_blocks < 1 {
            return Err(Error::Config("temporal_kernel and num_blocks must be at least 1".into()));
        }
        if self.base_channels.contains(&0) {
            return Err(Error::Config("base channels must be positive".into()));
        }
        Ok(())
    }
}

/// Gated temporal convolution: `(P + residual) ⊙ σ(Q)`.
#[derive(Clone, Debug)]
struct TemporalConv {
    weight: ParamId,
    bias: ParamId,
    align: Option<Linear>,
    kernel: usize,
    inputs: usize,
    outputs: usize,
}

impl TemporalConv {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        kernel: usize,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * inputs;
        let weight = store.insert(
            format!("{name}.weight"),
            fan_in_uniform(rng, kernel * inputs, 2 * outputs, fan_in),
        );
        let bias = store.insert(format!("{name}.bias"), fan_in_uniform(rng, 1, 2 * outputs, fan_in));
        let align = (inputs > outputs).then(|| Linear::new(store, &format!("{name}.align"), inputs, outputs, rng));
        Self {
            weight,
            bias,
            align,
            kernel,
            inputs,
            outputs,
        }
    }

    /// `x`: `[t_len·slice × inputs]` → `[(t_len − kernel + 1)·slice × outputs]`.
    fn forward(&self, g: &mut Graph, x: Var, t_len: usize, slice: usize) -> Var {
        let t_out = t_len + 1 - self.kernel;
        let parts: Vec<Var> = (0..self.kernel)
            .map(|k| g.slice_rows(x, k * slice, t_out * slice))
            .collect();
        let stacked = if parts.len() == 1 { parts[0] } else { g.concat_cols(&parts) };
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let h = g.matmul(stacked, w);
        let h = g.add_row(h, b);
        let p = g.slice_cols(h, 0, self.outputs);
        let q = g.slice_cols(h, self.outputs, self.outputs);
        let residual = g.slice_rows(x, (self.kernel - 1) * slice, t_out * slice);
        let residual = match &self.align {
            Some(lin) => lin.forward(g, residual),
            None if self.inputs < self.outputs => g.pad_cols(residual, self.outputs),
            None => residual,
        };
        let gate = g.sigmoid(q);
        let lin = g.add(p, residual);
        g.mul(lin, gate)
    }
}

/// `relu(Σ_k T_k(L) X W_k + b)` with the Chebyshev recursion
/// `T_0 = X`, `T_1 = L X`, `T_k = 2 L T_{k−1} − T_{k−2}`.
#[derive(Clone, Debug)]
struct GraphConv {
    weight: ParamId,
    bias: ParamId,
    order: usize,
}

impl GraphConv {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        order: usize,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (order + 1) * inputs;
        let weight = store.insert(format!("{name}.weight"), fan_in_uniform(rng, fan_in, outputs, fan_in));
        let bias = store.insert(format!("{name}.bias"), fan_in_uniform(rng, 1, outputs, fan_in));
        Self { weight, bias, order }
    }

    fn forward(&self, g: &mut Graph, x: Var, lap: Var, nodes: usize) -> Var {
        let mut terms = vec![x];
        if self.order >= 1 {
            terms.push(g.graph_mix(lap, x, nodes));
        }
        for k in 2..=self.order {
            let prop = g.graph_mix(lap, terms[k - 1], nodes);
            let twice = g.scale(prop, 2.0);
            terms.push(g.sub(twice, terms[k - 2]));
        }
        let stacked = if terms.len() == 1 { terms[0] } else { g.concat_cols(&terms) };
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let h = g.matmul(stacked, w);
        let h = g.add_row(h, b);
        g.relu(h)
    }
}

#[derive(Clone, Debug)]
struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    fn new(store: &mut ParamStore, name: &str, nodes: usize, channels: usize) -> Self {
        let gain = store.insert(format!("{name}.gain"), ndarray::Array2::ones((nodes, channels)));
        let bias = store.insert(format!("{name}.bias"), ndarray::Array2::zeros((nodes, channels)));
        Self { gain, bias }
    }

    fn forward(&self, g: &mut Graph, x: Var, nodes: usize) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, nodes)
    }
}

#[derive(Clone, Debug)]
struct StBlock {
    head: TemporalConv,
    graph: GraphConv,
    tail: TemporalConv,
    norm: LayerNorm,
}

/// Parameterized block stack over a fixed node count.
#[derive(Clone, Debug)]
pub struct Stgnn {
    config: StgnnConfig,
    nodes: usize,
    time_steps: usize,
    outputs: usize,
    blocks: Vec<StBlock>,
    out_conv: TemporalConv,
    out_norm: LayerNorm,
    out_head: Linear,
}

impl Stgnn {
    /// Registers the stack's parameters under `prefix`. Fails for the
    /// averaging setting or when `time_steps` is too short for the
    /// receptive field.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: &StgnnConfig,
        nodes: usize,
        inputs: usize,
        outputs: usize,
        time_steps: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let [c_t, c_s, c_o] = config
            .channels()
            .ok_or_else(|| Error::Config("averaging setting has no graph network".into()))?;
        if time_steps < config.min_time_steps() {
            return Err(Error::Config(format!(
                "sequence of {time_steps} steps is shorter than the receptive field ({})",
                config.min_time_steps()
            )));
        }
        let kt = config.temporal_kernel;
        let mut blocks = Vec::with_capacity(config.num_blocks);
        let mut c_in = inputs;
        for i in 0..config.num_blocks {
            let name = format!("{prefix}.block{i}");
            blocks.push(StBlock {
                head: TemporalConv::new(store, &format!("{name}.tconv1"), kt, c_in, c_t, rng),
                graph: GraphConv::new(store, &format!("{name}.gconv"), config.cheb_order, c_t, c_s, rng),
                tail: TemporalConv::new(store, &format!("{name}.tconv2"), kt, c_s, c_o, rng),
                norm: LayerNorm::new(store, &format!("{name}.norm"), nodes, c_o),
            });
            c_in = c_o;
        }
        let remaining = time_steps - config.num_blocks * 2 * (kt - 1);
        let out_conv = TemporalConv::new(store, &format!("{prefix}.output.tconv"), remaining, c_o, c_o, rng);
        let out_norm = LayerNorm::new(store, &format!("{prefix}.output.norm"), nodes, c_o);
        let out_head = Linear::new(store, &format!("{prefix}.output.head"), c_o, outputs, rng);
        Ok(Self {
            config: config.clone(),
            nodes,
            time_steps,
            outputs,
            blocks,
            out_conv,
            out_norm,
            out_head,
        })
    }

    pub fn config(&self) -> &StgnnConfig {
        &self.config
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn time_steps(&self) -> usize {
        self.time_steps
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    /// `sequence`: `[T·S·N × C_in]`; `lap`: one `[N × N]` matrix shared by all
    /// samples or `S` stacked matrices `[S·N × N]`. Returns `[S·N × outputs]`.
    pub fn forward(&self, g: &mut Graph, sequence: Var, lap: Var, samples: usize) -> Result<Var> {
        let slice = samples * self.nodes;
        let (rows, _) = g.shape(sequence);
        if rows != self.time_steps * slice {
            return Err(Error::Shape(format!(
                "sequence has {rows} rows, expected {} steps x {samples} samples x {} nodes",
                self.time_steps, self.nodes
            )));
        }
        let (lr, lc) = g.shape(lap);
        if lc != self.nodes || (lr != self.nodes && lr != slice) {
            return Err(Error::Shape(format!(
                "propagation matrix is {lr} x {lc}, expected {n} x {n} or {slice} x {n}",
                n = self.nodes
            )));
        }
        let kt = self.config.temporal_kernel;
        let mut x = sequence;
        let mut t_len = self.time_steps;
        for block in &self.blocks {
            x = block.head.forward(g, x, t_len, slice);
            t_len -= kt - 1;
            x = block.graph.forward(g, x, lap, self.nodes);
            x = block.tail.forward(g, x, t_len, slice);
            t_len -= kt - 1;
            x = block.norm.forward(g, x, self.nodes);
        }
        x = self.out_conv.forward(g, x, t_len, slice);
        x = self.out_norm.forward(g, x, self.nodes);
        Ok(self.out_head.forward(g, x))
    }
}

/// Elementwise mean of a sequence of equally shaped states.
pub fn average_aggregate(g: &mut Graph, sequence: &[Var]) -> Result<Var> {
    if sequence.is_empty() {
        return Err(Error::Shape("cannot average an empty sequence".into()));
    }
    let total = g.sum(sequence);
    Ok(g.scale(total, 1.0 / sequence.len() as f64))
}
