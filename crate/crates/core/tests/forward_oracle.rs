//! Loop-level re-implementations of the model and the dense baseline,
//! reading parameters by name, compared against the batched graph code.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use suster::autograd::Graph;
use suster::baselines::{dense_batch, StgcnBaseline};
use suster::datasets::{synth_generate, SampleWindow, SplitSpec, SynthConfig};
use suster::model::{AssignmentMode, ModelConfig, Recurrence, SusterModel};
use suster::params::ParamStore;
use suster::pipeline::Prepared;
use suster::stgnn::InnerFactor;
use suster::training::{Forecaster, ModelSpec};

type Mat = Vec<Vec<f64>>;
/// `[time][node][channel]`
type Seq = Vec<Mat>;

fn param(store: &ParamStore, name: &str) -> Mat {
    let id = store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.value(id).rows().into_iter().map(|r| r.to_vec()).collect()
}

fn has(store: &ParamStore, name: &str) -> bool {
    store.id(name).is_some()
}

fn affine(x: &[f64], w: &Mat, b: &Mat) -> Vec<f64> {
    assert_eq!(x.len(), w.len());
    (0..w[0].len())
        .map(|c| b[0][c] + x.iter().zip(w).map(|(xi, row)| xi * row[c]).sum::<f64>())
        .collect()
}

fn linear(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    affine(x, &param(store, &format!("{name}.weight")), &param(store, &format!("{name}.bias")))
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Gated temporal convolution with residual.
fn tconv(store: &ParamStore, name: &str, x: &Seq, kernel: usize) -> Seq {
    let w = param(store, &format!("{name}.weight"));
    let b = param(store, &format!("{name}.bias"));
    let cin = x[0][0].len();
    let cout = w[0].len() / 2;
    let align = has(store, &format!("{name}.align.weight"));
    (0..x.len() + 1 - kernel)
        .map(|t| {
            (0..x[0].len())
                .map(|n| {
                    let stacked: Vec<f64> = (0..kernel).flat_map(|k| x[t + k][n].clone()).collect();
                    let h = affine(&stacked, &w, &b);
                    let last = &x[t + kernel - 1][n];
                    let res: Vec<f64> = if align {
                        linear(store, &format!("{name}.align"), last)
                    } else {
                        (0..cout).map(|c| if c < cin { last[c] } else { 0.0 }).collect()
                    };
                    (0..cout).map(|c| (h[c] + res[c]) * sigmoid(h[cout + c])).collect()
                })
                .collect()
        })
        .collect()
}

fn propagate(lap: &Mat, x: &Mat) -> Mat {
    (0..x.len())
        .map(|n| (0..x[0].len()).map(|c| (0..x.len()).map(|m| lap[n][m] * x[m][c]).sum()).collect())
        .collect()
}

/// Chebyshev graph convolution of order 2 with ReLU.
fn gconv(store: &ParamStore, name: &str, x: &Seq, lap: &Mat) -> Seq {
    let w = param(store, &format!("{name}.weight"));
    let b = param(store, &format!("{name}.bias"));
    x.iter()
        .map(|slab| {
            let t1 = propagate(lap, slab);
            let lt1 = propagate(lap, &t1);
            (0..slab.len())
                .map(|n| {
                    let t2: Vec<f64> = lt1[n].iter().zip(&slab[n]).map(|(a, b)| 2.0 * a - b).collect();
                    let stacked: Vec<f64> = slab[n].iter().chain(&t1[n]).chain(&t2).copied().collect();
                    relu(affine(&stacked, &w, &b))
                })
                .collect()
        })
        .collect()
}

fn layer_norm(store: &ParamStore, name: &str, x: &Seq) -> Seq {
    let gain = param(store, &format!("{name}.gain"));
    let bias = param(store, &format!("{name}.bias"));
    x.iter()
        .map(|slab| {
            let all: Vec<f64> = slab.iter().flatten().copied().collect();
            let mean = all.iter().sum::<f64>() / all.len() as f64;
            let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
            let inv = 1.0 / (var + 1e-5).sqrt();
            slab.iter()
                .enumerate()
                .map(|(n, row)| {
                    row.iter()
                        .enumerate()
                        .map(|(c, v)| (v - mean) * inv * gain[n][c] + bias[n][c])
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Two ST-blocks, output convolution over the remaining steps, head.
fn stgcn(store: &ParamStore, prefix: &str, x: &Seq, lap: &Mat) -> Mat {
    let mut x = x.clone();
    for i in 0..2 {
        let name = format!("{prefix}.block{i}");
        x = tconv(store, &format!("{name}.tconv1"), &x, 3);
        x = gconv(store, &format!("{name}.gconv"), &x, lap);
        x = tconv(store, &format!("{name}.tconv2"), &x, 3);
        x = layer_norm(store, &format!("{name}.norm"), &x);
    }
    let remaining = x.len();
    x = tconv(store, &format!("{prefix}.output.tconv"), &x, remaining);
    x = layer_norm(store, &format!("{prefix}.output.norm"), &x);
    assert_eq!(x.len(), 1);
    x[0].iter().map(|row| linear(store, &format!("{prefix}.output.head"), row)).collect()
}

fn mlp(store: &ParamStore, name: &str, layers: usize, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for i in 1..=layers {
        h = linear(store, &format!("{name}.fc{i}"), &h);
        if i < layers {
            h = relu(h);
        }
    }
    h
}

fn naive_laplacian(x: &Mat) -> Mat {
    x.iter()
        .map(|a| {
            let row: Vec<f64> = x.iter().map(|b| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>().max(0.0)).collect();
            softmax(&row)
        })
        .collect()
}

/// Whole-model prediction for one window with argmax assignment.
fn naive_model(store: &ParamStore, cfg: &ModelConfig, w: &SampleWindow) -> Vec<f64> {
    let (v, d) = (cfg.num_nodes, cfg.embed_dim);
    let flat = mlp(store, "context", 2, &w.context().context());
    let ctx: Mat = (0..v).map(|i| flat[i * d..(i + 1) * d].to_vec()).collect();
    let mut states: Seq = Vec::new();
    for (i, obs) in w.steps.iter().enumerate() {
        let prev = if i == 0 { &ctx } else { &states[i - 1] };
        let prev_flat: Vec<f64> = prev.iter().flatten().copied().collect();
        let mut delta = vec![vec![0.0; d]; v];
        for o in obs {
            let input: Vec<f64> = prev_flat.iter().copied().chain(o.features()).collect();
            let info = mlp(store, "inform", 3, &input);
            let probs = softmax(&mlp(store, "sample", 2, &[o.position.lat, o.position.lon]));
            let best = (0..v).fold(0, |b, j| if probs[j] > probs[b] { j } else { b });
            for c in 0..d {
                delta[best][c] += info[c];
            }
        }
        let base: Mat = match cfg.recurrence {
            Recurrence::Literal => (0..v)
                .map(|n| (0..d).map(|c| ctx[n][c] + states.iter().map(|s| s[n][c]).sum::<f64>()).collect())
                .collect(),
            Recurrence::Incremental => prev.clone(),
        };
        states.push((0..v).map(|n| (0..d).map(|c| base[n][c] + delta[n][c]).collect()).collect());
    }
    let future: Mat = match cfg.stgnn_factor {
        InnerFactor::Average => (0..v)
            .map(|n| (0..d).map(|c| states.iter().map(|s| s[n][c]).sum::<f64>() / states.len() as f64).collect())
            .collect(),
        InnerFactor::Scaled(_) => stgcn(store, "stgnn", &states, &naive_laplacian(states.last().unwrap())),
    };
    let future_flat: Vec<f64> = future.iter().flatten().copied().collect();
    w.query_locations
        .iter()
        .map(|q| {
            let input: Vec<f64> = future_flat.iter().copied().chain([q.lat, q.lon]).collect();
            let h = relu(linear(store, "decoder.fc1", &input));
            let h = linear(store, "decoder.fc2", &h);
            linear(store, "decoder.fc3", &h)[0]
        })
        .collect()
}

fn fixture(dropout: f64) -> Prepared {
    let mut sc = SynthConfig::new(6, 400, 2, 2.0, 11);
    sc.interval_minutes = 15;
    Prepared::new(synth_generate(&sc).unwrap(), dropout, 4, 12, &SplitSpec::default()).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
    }
}

#[test]
fn model_matches_loop_oracle() {
    let prep = fixture(0.5);
    for (factor, recurrence) in [
        (InnerFactor::Scaled(0.5), Recurrence::Literal),
        (InnerFactor::Scaled(1.0), Recurrence::Incremental),
        (InnerFactor::Scaled(0.25), Recurrence::Literal),
        (InnerFactor::Average, Recurrence::Literal),
    ] {
        let cfg = ModelConfig {
            num_nodes: 3,
            embed_dim: 4,
            stgnn_factor: factor,
            recurrence,
            ..Default::default()
        };
        let model = SusterModel::new(cfg.clone(), 21).unwrap();
        for w in prep.windows.iter().step_by(37).take(6) {
            assert!(w.num_observations() > 0);
            let got = model.predict(w).unwrap();
            let want = naive_model(model.params(), &cfg, w);
            assert_close(&got, &want, 1e-9);
        }
    }
}

#[test]
fn batched_forward_matches_oracle_per_window() {
    let prep = fixture(0.7);
    let cfg = ModelConfig {
        num_nodes: 3,
        embed_dim: 4,
        ..Default::default()
    };
    let model = SusterModel::new(cfg.clone(), 3).unwrap();
    let windows: Vec<&SampleWindow> = prep.windows[10..15].iter().collect();
    let mut g = Graph::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let trace = model.forward(&mut g, &windows, AssignmentMode::Argmax, &mut rng).unwrap();
    let got: Vec<f64> = g.value(trace.predictions).iter().copied().collect();
    let want: Vec<f64> = windows.iter().flat_map(|w| naive_model(model.params(), &cfg, w)).collect();
    assert_close(&got, &want, 1e-9);
}

fn naive_baseline(store: &ParamStore, lap: &Mat, inputs: &ndarray::Array2<f64>, batch: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for b in 0..batch {
        let seq: Seq = (0..m)
            .map(|t| (0..k).map(|j| inputs.row((t * batch + b) * k + j).to_vec()).collect())
            .collect();
        out.extend(stgcn(store, "stgcn", &seq, lap).into_iter().map(|r| r[0]));
    }
    out
}

#[test]
fn baseline_matches_loop_oracle() {
    let prep = fixture(0.8);
    let normalizer = prep.features.normalizer;
    for random_adj in [false, true] {
        let cfg = suster::baselines::BaselineConfig {
            use_random_adjacency: random_adj,
            adjacency_seed: 9,
            ..Default::default()
        };
        let base = StgcnBaseline::new(cfg, prep.dataset.sensor_coords(), normalizer, 2).unwrap();
        let lap: Mat = base.laplacian().rows().into_iter().map(|r| r.to_vec()).collect();
        let windows: Vec<&SampleWindow> = prep.windows[30..33].iter().collect();
        let dense = dense_batch(&windows, normalizer.normalize(0.0), &normalizer).unwrap();
        let mut g = Graph::new(base.params());
        let out = base.stgcn_forward(&mut g, &dense).unwrap();
        let got: Vec<f64> = g.value(out).iter().copied().collect();
        let want = naive_baseline(base.params(), &lap, &dense.inputs, 3, 6, 12);
        assert_close(&got, &want, 1e-9);
    }
}

#[test]
fn dense_layout_fills_missing_readings_with_normalized_zero() {
    let prep = fixture(0.8);
    let normalizer = prep.features.normalizer;
    let w = &prep.windows[50];
    let dense = dense_batch(&[w], normalizer.normalize(0.0), &normalizer).unwrap();
    for t in 0..12 {
        for j in 0..6 {
            let row = dense.inputs.row(t * 6 + j);
            let raw = prep.dataset.readings()[[w.start + t, j]];
            let expected = if prep.mask.is_kept(w.start + t, j) {
                (raw - normalizer.mean) / normalizer.std
            } else {
                -normalizer.mean / normalizer.std
            };
            assert!((row[0] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn permuted_baseline_undoes_its_permutation() {
    let prep = fixture(0.5);
    let normalizer = prep.features.normalizer;
    let cfg = suster::baselines::BaselineConfig {
        use_permutation: true,
        ..Default::default()
    };
    let base = StgcnBaseline::new(cfg, prep.dataset.sensor_coords(), normalizer, 2).unwrap();
    let lap: Mat = base.laplacian().rows().into_iter().map(|r| r.to_vec()).collect();
    let windows: Vec<&SampleWindow> = prep.windows[60..62].iter().collect();
    let mut g = Graph::new(base.params());
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let out = base.forward(&mut g, &windows, &mut rng).unwrap();
    let got: Vec<f64> = g.value(out).iter().copied().collect();

    // Same draw, then feed sensors in permuted order and map results back.
    let mut perm: Vec<usize> = (0..6).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(77));
    let dense = dense_batch(&windows, normalizer.normalize(0.0), &normalizer).unwrap();
    let mut permuted = dense.inputs.clone();
    for slab in 0..12 * 2 {
        for (j, &p) in perm.iter().enumerate() {
            permuted.row_mut(slab * 6 + j).assign(&dense.inputs.row(slab * 6 + p));
        }
    }
    let raw = naive_baseline(base.params(), &lap, &permuted, 2, 6, 12);
    let mut want = vec![0.0; 12];
    for b in 0..2 {
        for (j, &p) in perm.iter().enumerate() {
            want[b * 6 + p] = raw[b * 6 + j];
        }
    }
    assert_close(&got, &want, 1e-9);
}

#[test]
fn forecaster_wrapper_uses_eval_assignment() {
    let prep = fixture(0.5);
    let cfg = ModelConfig {
        num_nodes: 3,
        embed_dim: 4,
        ..Default::default()
    };
    let model = prep.build_model(&ModelSpec::Suster(cfg.clone()), 8).unwrap();
    let Forecaster::Suster(inner) = &model else {
        panic!("expected the reconstruction model")
    };
    let preds = suster::training::predict_all(&model, &prep.windows[..4], &normalizer_of(&prep), 3).unwrap();
    for (w, p) in prep.windows[..4].iter().zip(&preds) {
        let want: Vec<f64> = naive_model(inner.params(), &cfg, w)
            .into_iter()
            .map(|z| prep.features.normalizer.denormalize(z))
            .collect();
        assert_close(p, &want, 1e-9);
    }
}

fn normalizer_of(prep: &Prepared) -> suster::datasets::Normalizer {
    prep.features.normalizer
}
