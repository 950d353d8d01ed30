//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a two-dimensional [`Array2`]. A forward pass
//! appends nodes to a [`Graph`]; [`Graph::backward`] walks the tape in reverse
//! and returns a gradient for every node that influenced the scalar output.
//! Parameters enter through [`Graph::param`] so their gradients can be
//! collected per [`ParamId`] afterwards.
//!
//! Besides the usual elementwise and matrix operations the tape carries a few
//! fused, block-structured operations that the spatio-temporal models need:
//! per-block Gram matrices, per-block graph propagation, per-block layer
//! normalization and the sparse outer-product scatter used to write
//! observation residuals into hidden nodes.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::params::{ParamId, ParamStore};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    PadCols(Var),
    StraightThrough(Var),
    ScatterOuter {
        assign: Var,
        info: Var,
        owner: Vec<usize>,
        nodes: usize,
    },
    BlockGram {
        x: Var,
        block: usize,
    },
    GraphMix {
        lap: Var,
        x: Var,
        block: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        block: usize,
        normalized: Array2<f64>,
        inv_std: Vec<f64>,
    },
    MeanAbsError {
        pred: Var,
        target: Array2<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// A single forward pass. Borrowing the parameter store keeps parameter
/// leaves in sync with the values the optimizer sees.
pub struct Graph<'p> {
    nodes: Vec<Node>,
    params: &'p ParamStore,
    param_vars: Vec<Option<Var>>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            nodes: Vec::new(),
            params,
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        debug_assert_eq!(value.dim(), (1, 1));
        value[[0, 0]]
    }

    /// Constant input; receives a gradient but is not a parameter.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a stored parameter. Repeated calls reuse the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let value = self.params.value(id).clone();
        let v = self.push(value, Op::Param);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    /// Sum of several equally shaped nodes.
    pub fn sum(&mut self, items: &[Var]) -> Var {
        assert!(!items.is_empty(), "sum of nothing");
        let mut acc = items[0];
        for &v in &items[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row: bias shape");
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        self.push(value, Op::Scale(a, factor))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a).view());
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape: element count");
        let flat: Vec<f64> = src.iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), flat).expect("reshape");
        self.push(value, Op::Reshape(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&v| self.value(v).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&v| self.value(v).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: col mismatch");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols(a, start))
    }

    /// Output row `i` is input row `index[i]`.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Var {
        let src = self.value(a);
        let value = src.select(Axis(0), &index);
        self.push(value, Op::GatherRows(a, index))
    }

    /// Zero-pads columns on the right up to `cols`.
    pub fn pad_cols(&mut self, a: Var, cols: usize) -> Var {
        let src = self.value(a);
        let (r, c) = src.dim();
        assert!(cols >= c, "pad_cols: cannot shrink");
        let mut value = Array2::zeros((r, cols));
        value.slice_mut(s![.., ..c]).assign(src);
        self.push(value, Op::PadCols(a))
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Array2<f64>) -> Var {
        assert_eq!(self.shape(soft), hard.dim(), "straight_through: shape");
        self.push(hard, Op::StraightThrough(soft))
    }

    /// Sum of outer products written into per-owner node blocks.
    ///
    /// `assign` is `[n × nodes]`, `info` is `[n × d]`, `owner[o]` names the
    /// block that row `o` belongs to. The result has `owners * nodes` rows
    /// where block `b` holds `Σ_{o: owner[o]=b} assign[o]ᵀ · info[o]`.
    pub fn scatter_outer(&mut self, assign: Var, info: Var, owner: Vec<usize>, owners: usize) -> Var {
        let a = self.value(assign);
        let inf = self.value(info);
        let (n, nodes) = a.dim();
        assert_eq!(inf.nrows(), n, "scatter_outer: row mismatch");
        assert_eq!(owner.len(), n, "scatter_outer: owner length");
        let d = inf.ncols();
        let mut value = Array2::zeros((owners * nodes, d));
        for (o, &b) in owner.iter().enumerate() {
            assert!(b < owners, "scatter_outer: owner out of range");
            for j in 0..nodes {
                let w = a[[o, j]];
                if w != 0.0 {
                    value
                        .row_mut(b * nodes + j)
                        .scaled_add(w, &inf.row(o));
                }
            }
        }
        self.push(
            value,
            Op::ScatterOuter {
                assign,
                info,
                owner,
                nodes,
            },
        )
    }

    /// Per-block Gram matrix: rows are split into blocks of `block` rows and
    /// each block `B` yields `B · Bᵀ`, stacked vertically.
    pub fn block_gram(&mut self, x: Var, block: usize) -> Var {
        let src = self.value(x);
        let rows = src.nrows();
        assert_eq!(rows % block, 0, "block_gram: rows not a multiple of block");
        let mut value = Array2::zeros((rows, block));
        for q in 0..rows / block {
            let b = src.slice(s![q * block..(q + 1) * block, ..]);
            value
                .slice_mut(s![q * block..(q + 1) * block, ..])
                .assign(&b.dot(&b.t()));
        }
        self.push(value, Op::BlockGram { x, block })
    }

    /// Propagates every `block`-row slab of `x` through a `block × block`
    /// matrix. `lap` holds one or more stacked propagation matrices; slab `q`
    /// uses matrix `q mod (lap.rows / block)`.
    pub fn graph_mix(&mut self, lap: Var, x: Var, block: usize) -> Var {
        let l = self.value(lap);
        let src = self.value(x);
        assert_eq!(l.ncols(), block, "graph_mix: propagation width");
        assert_eq!(l.nrows() % block, 0, "graph_mix: propagation height");
        assert_eq!(src.nrows() % block, 0, "graph_mix: rows not a multiple of block");
        let nlap = l.nrows() / block;
        let mut value = Array2::zeros(src.dim());
        for q in 0..src.nrows() / block {
            let p = q % nlap;
            let lb = l.slice(s![p * block..(p + 1) * block, ..]);
            let xb = src.slice(s![q * block..(q + 1) * block, ..]);
            value
                .slice_mut(s![q * block..(q + 1) * block, ..])
                .assign(&lb.dot(&xb));
        }
        self.push(value, Op::GraphMix { lap, x, block })
    }

    /// Layer normalization over every `block`-row slab (all of its entries),
    /// followed by an elementwise affine map with `[block × c]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, block: usize) -> Var {
        let src = self.value(x);
        let (rows, cols) = src.dim();
        assert_eq!(rows % block, 0, "layer_norm: rows not a multiple of block");
        assert_eq!(self.shape(gain), (block, cols), "layer_norm: gain shape");
        assert_eq!(self.shape(bias), (block, cols), "layer_norm: bias shape");
        let g = self.value(gain);
        let bvals = self.value(bias);
        let count = (block * cols) as f64;
        let mut normalized = Array2::zeros((rows, cols));
        let mut value = Array2::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows / block);
        for q in 0..rows / block {
            let slab = src.slice(s![q * block..(q + 1) * block, ..]);
            let mean = slab.sum() / count;
            let var = slab.mapv(|v| (v - mean) * (v - mean)).sum() / count;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            let xhat = slab.mapv(|v| (v - mean) * inv);
            value
                .slice_mut(s![q * block..(q + 1) * block, ..])
                .assign(&(&xhat * g + bvals));
            normalized
                .slice_mut(s![q * block..(q + 1) * block, ..])
                .assign(&xhat);
        }
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                block,
                normalized,
                inv_std,
            },
        )
    }

    /// Mean absolute error against a constant target, as a `1 × 1` node.
    pub fn mean_abs_error(&mut self, pred: Var, target: Array2<f64>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.dim(), target.dim(), "mean_abs_error: shape mismatch");
        let n = p.len().max(1) as f64;
        let total: f64 = p.iter().zip(target.iter()).map(|(a, b)| (a - b).abs()).sum();
        let value = Array2::from_elem((1, 1), total / n);
        self.push(value, Op::MeanAbsError { pred, target })
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::AddRow(a, row) => {
                    let grow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, grow);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, &g * *f),
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Relu(a) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(self.value(*a), |gv, &x| {
                        if x <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(&node.value, |gv, &y| *gv *= y * (1.0 - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Array2::zeros(y.dim());
                    for ((mut out, yr), gr) in ga.rows_mut().into_iter().zip(y.rows()).zip(g.rows()) {
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(p, q)| p * q).sum();
                        for ((o, &yy), &gg) in out.iter_mut().zip(yr.iter()).zip(gr.iter()) {
                            *o = yy * (gg - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::Reshape(a) => {
                    let (r, c) = self.shape(*a);
                    let flat: Vec<f64> = g.iter().copied().collect();
                    accumulate(&mut grads, *a, Array2::from_shape_vec((r, c), flat).expect("reshape"));
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let c = self.shape(p).1;
                        accumulate(&mut grads, p, g.slice(s![.., start..start + c]).to_owned());
                        start += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let r = self.shape(p).0;
                        accumulate(&mut grads, p, g.slice(s![start..start + r, ..]).to_owned());
                        start += r;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    let len = g.nrows();
                    ga.slice_mut(s![*start..*start + len, ..]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    let len = g.ncols();
                    ga.slice_mut(s![.., *start..*start + len]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, index) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    for (i, &src) in index.iter().enumerate() {
                        ga.row_mut(src).scaled_add(1.0, &g.row(i));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::PadCols(a) => {
                    let c = self.shape(*a).1;
                    accumulate(&mut grads, *a, g.slice(s![.., ..c]).to_owned());
                }
                Op::StraightThrough(soft) => accumulate(&mut grads, *soft, g.clone()),
                Op::ScatterOuter {
                    assign,
                    info,
                    owner,
                    nodes,
                } => {
                    let a = self.value(*assign);
                    let inf = self.value(*info);
                    let mut ga = Array2::zeros(a.dim());
                    let mut gi = Array2::zeros(inf.dim());
                    for (o, &b) in owner.iter().enumerate() {
                        for j in 0..*nodes {
                            let gr = g.row(b * nodes + j);
                            ga[[o, j]] = gr.dot(&inf.row(o));
                            let w = a[[o, j]];
                            if w != 0.0 {
                                gi.row_mut(o).scaled_add(w, &gr);
                            }
                        }
                    }
                    accumulate(&mut grads, *assign, ga);
                    accumulate(&mut grads, *info, gi);
                }
                Op::BlockGram { x, block } => {
                    let src = self.value(*x);
                    let mut gx = Array2::zeros(src.dim());
                    for q in 0..src.nrows() / block {
                        let rows = q * block..(q + 1) * block;
                        let gb = g.slice(s![rows.clone(), ..]);
                        let xb = src.slice(s![rows.clone(), ..]);
                        let sym = &gb + &gb.t();
                        gx.slice_mut(s![rows, ..]).assign(&sym.dot(&xb));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::GraphMix { lap, x, block } => {
                    let l = self.value(*lap);
                    let src = self.value(*x);
                    let nlap = l.nrows() / block;
                    let mut gl = Array2::zeros(l.dim());
                    let mut gx = Array2::zeros(src.dim());
                    for q in 0..src.nrows() / block {
                        let p = q % nlap;
                        let lrows = p * block..(p + 1) * block;
                        let xrows = q * block..(q + 1) * block;
                        let gb = g.slice(s![xrows.clone(), ..]);
                        let lb = l.slice(s![lrows.clone(), ..]);
                        let xb = src.slice(s![xrows.clone(), ..]);
                        gx.slice_mut(s![xrows, ..]).assign(&lb.t().dot(&gb));
                        let mut glb = gl.slice_mut(s![lrows, ..]);
                        glb += &gb.dot(&xb.t());
                    }
                    accumulate(&mut grads, *lap, gl);
                    accumulate(&mut grads, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    block,
                    normalized,
                    inv_std,
                } => {
                    let gvals = self.value(*gain);
                    let (rows, cols) = normalized.dim();
                    let count = (block * cols) as f64;
                    let mut ggain = Array2::zeros(gvals.dim());
                    let mut gbias = Array2::zeros(gvals.dim());
                    let mut gx = Array2::zeros((rows, cols));
                    for (q, &inv) in inv_std.iter().enumerate() {
                        let r = q * block..(q + 1) * block;
                        let gb = g.slice(s![r.clone(), ..]);
                        let xhat = normalized.slice(s![r.clone(), ..]);
                        ggain += &(&gb * &xhat);
                        gbias += &gb;
                        let dxhat = &gb * gvals;
                        let mean_d = dxhat.sum() / count;
                        let mean_dx = (&dxhat * &xhat).sum() / count;
                        let dx = (&dxhat - mean_d - &xhat * mean_dx) * inv;
                        gx.slice_mut(s![r, ..]).assign(&dx);
                    }
                    accumulate(&mut grads, *gain, ggain);
                    accumulate(&mut grads, *bias, gbias);
                    accumulate(&mut grads, *x, gx);
                }
                Op::MeanAbsError { pred, target } => {
                    let p = self.value(*pred);
                    let n = p.len().max(1) as f64;
                    let scale = g[[0, 0]] / n;
                    let mut gp = p - target;
                    gp.mapv_inplace(|d| {
                        if d > 0.0 {
                            scale
                        } else if d < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *pred, gp);
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    /// Gradients of every parameter touched by this pass, indexed by
    /// [`ParamId`]. Untouched parameters get `None`.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Array2<f64>>> {
        self.param_vars
            .iter()
            .map(|v| v.and_then(|v| grads.get(v).cloned()))
            .collect()
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(
        x0: &Array2<f64>,
        f: &dyn Fn(&Array2<f64>) -> f64,
    ) -> Array2<f64> {
        let h = 1e-6;
        let mut out = Array2::zeros(x0.dim());
        for idx in 0..x0.len() {
            let mut plus = x0.clone();
            let mut minus = x0.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            out.as_slice_mut().unwrap()[idx] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        assert_eq!(a.dim(), b.dim());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    /// Runs `build` with `x` as an input leaf, reduces with MAE against a
    /// fixed target, and compares the tape gradient to central differences.
    fn check_unary(x: Array2<f64>, build: impl Fn(&mut Graph, Var) -> Var) {
        let store = ParamStore::default();
        let eval = |x: &Array2<f64>| {
            let mut g = Graph::new(&store);
            let xv = g.input(x.clone());
            let y = build(&mut g, xv);
            let target = Array2::from_elem(g.shape(y), 0.123);
            let loss = g.mean_abs_error(y, target);
            g.scalar(loss)
        };
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let y = build(&mut g, xv);
        let target = Array2::from_elem(g.shape(y), 0.123);
        let loss = g.mean_abs_error(y, target);
        let grads = g.backward(loss);
        let analytic = grads.get(xv).cloned().unwrap_or_else(|| Array2::zeros(x.dim()));
        assert_close(&analytic, &numeric_grad(&x, &eval), 1e-5);
    }

    fn sample(r: usize, c: usize, salt: f64) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |(i, j)| ((i * 7 + j * 3) as f64 * 0.37 + salt).sin())
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        check_unary(sample(3, 4, 0.1), |g, x| g.relu(x));
        check_unary(sample(3, 4, 0.2), |g, x| g.sigmoid(x));
        check_unary(sample(3, 4, 0.3), |g, x| g.softmax_rows(x));
        check_unary(sample(3, 4, 0.4), |g, x| g.mul(x, x));
        check_unary(sample(3, 4, 0.5), |g, x| g.scale(x, -2.5));
        check_unary(sample(3, 4, 0.6), |g, x| g.transpose(x));
        check_unary(sample(3, 4, 0.7), |g, x| g.reshape(x, 2, 6));
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        check_unary(sample(4, 3, 0.1), |g, x| {
            let a = g.slice_rows(x, 1, 2);
            let b = g.slice_cols(a, 1, 2);
            let bt = g.transpose(b);
            let ab = g.matmul(bt, a);
            let c = g.concat_cols(&[ab, a]);
            g.concat_rows(&[c, c])
        });
        check_unary(sample(4, 3, 0.2), |g, x| g.gather_rows(x, vec![3, 0, 3, 1]));
        check_unary(sample(4, 3, 0.3), |g, x| g.pad_cols(x, 5));
        check_unary(sample(4, 3, 0.4), |g, x| {
            let row = g.slice_rows(x, 0, 1);
            g.add_row(x, row)
        });
    }

    #[test]
    fn block_ops_match_finite_differences() {
        check_unary(sample(6, 3, 0.1), |g, x| g.block_gram(x, 3));
        check_unary(sample(6, 2, 0.2), |g, x| {
            let lap = g.block_gram(x, 2);
            let lap = g.softmax_rows(lap);
            g.graph_mix(lap, x, 2)
        });
        // shared propagation matrix across slabs
        check_unary(sample(8, 2, 0.3), |g, x| {
            let top = g.slice_rows(x, 0, 2);
            let lap = g.block_gram(top, 2);
            g.graph_mix(lap, x, 2)
        });
        check_unary(sample(6, 3, 0.4), |g, x| {
            let gain = g.slice_rows(x, 0, 3);
            let bias = g.slice_rows(x, 3, 3);
            g.layer_norm(x, gain, bias, 3)
        });
    }

    #[test]
    fn scatter_outer_writes_one_row_per_observation() {
        let store = ParamStore::default();
        let mut g = Graph::new(&store);
        let assign = g.input(array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let info = g.input(array![[1.0, 2.0], [3.0, 4.0], [10.0, 20.0]]);
        let out = g.scatter_outer(assign, info, vec![0, 0, 1], 2);
        let expected = array![
            [3.0, 4.0],
            [1.0, 2.0],
            [0.0, 0.0],
            [0.0, 0.0],
            [10.0, 20.0],
            [0.0, 0.0]
        ];
        assert_eq!(g.value(out), &expected);
        check_unary(sample(3, 3, 0.9), |g, a| {
            let info = g.slice_cols(a, 0, 2);
            g.scatter_outer(a, info, vec![1, 0, 1], 2)
        });
    }

    #[test]
    fn straight_through_forwards_hard_and_backwards_identity() {
        let store = ParamStore::default();
        let mut g = Graph::new(&store);
        let soft = g.input(array![[0.2, 0.8]]);
        let st = g.straight_through(soft, array![[0.0, 1.0]]);
        assert_eq!(g.value(st), &array![[0.0, 1.0]]);
        let w = g.input(array![[3.0], [5.0]]);
        let y = g.matmul(st, w);
        let loss = g.mean_abs_error(y, array![[0.0]]);
        let grads = g.backward(loss);
        assert_eq!(grads.get(soft).unwrap(), &array![[3.0, 5.0]]);
    }

    #[test]
    fn param_leaves_are_shared_and_collected() {
        let mut store = ParamStore::default();
        let w = store.insert("w", array![[2.0]]);
        let mut g = Graph::new(&store);
        let a = g.param(w);
        let b = g.param(w);
        assert_eq!(a, b);
        let y = g.mul(a, b);
        let loss = g.mean_abs_error(y, array![[0.0]]);
        let grads = g.backward(loss);
        let pg = g.param_grads(&grads);
        assert_eq!(pg[0].as_ref().unwrap()[[0, 0]], 4.0);
    }
}
