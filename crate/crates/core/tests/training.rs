use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use suster::autograd::Graph;
use suster::baselines::BaselineConfig;
use suster::datasets::{synth_generate, SampleWindow, SplitSpec, SynthConfig};
use suster::model::ModelConfig;
use suster::params::{ParamStore, TensorRecord};
use suster::pipeline::{multirun, run_single, Prepared};
use suster::training::{
    batch_loss, evaluate, predict_all, train, Adam, Checkpoint, Forecaster, ModelSpec, Phase, TrainConfig,
};

fn fixture() -> Prepared {
    let mut sc = SynthConfig::new(6, 500, 2, 2.0, 5);
    sc.interval_minutes = 15;
    Prepared::new(synth_generate(&sc).unwrap(), 0.8, 2, 12, &SplitSpec::default()).unwrap()
}

fn small_model() -> ModelSpec {
    ModelSpec::Suster(ModelConfig {
        num_nodes: 3,
        embed_dim: 4,
        ..Default::default()
    })
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        ..Default::default()
    }
}

#[test]
fn zero_learning_rate_is_a_null_update() {
    let prep = fixture();
    let norm = prep.features.normalizer;
    let mut model = prep.build_model(&small_model(), 1).unwrap();
    let before = model.params().clone();
    let initial = evaluate(&model, prep.val(), &norm, 64).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        weight_decay: 0.0,
        ..quick(1)
    };
    let out = train(&mut model, prep.train(), prep.val(), &norm, &cfg, 0).unwrap();
    for (a, b) in model.params().iter().zip(before.iter()) {
        assert_eq!(a, b);
    }
    assert_eq!(out.history[0].val_mae, initial.mae);
    assert_eq!(out.best_val, initial);
}

/// Full-batch Adam on `y = Xw + b` under MAE is a convex problem; with a
/// small step the loss must go down every epoch.
#[test]
fn convex_fixture_loss_strictly_decreases() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let x = Array2::from_shape_fn((64, 3), |_| normal.sample(&mut rng));
    let w_true = ndarray::arr2(&[[1.5], [-2.0], [0.5]]);
    let y = x.dot(&w_true) + 0.3;
    let mut store = ParamStore::default();
    let w = store.insert("w", Array2::zeros((3, 1)));
    let b = store.insert("b", Array2::zeros((1, 1)));
    let mut adam = Adam::new(&store, 0.01, 1e-5);
    let mut losses = Vec::new();
    for _ in 0..10 {
        let (loss, grads) = {
            let mut g = Graph::new(&store);
            let xv = g.input(x.clone());
            let wv = g.param(w);
            let bv = g.param(b);
            let h = g.matmul(xv, wv);
            let pred = g.add_row(h, bv);
            let loss = g.mean_abs_error(pred, y.clone());
            let grads = g.backward(loss);
            (g.scalar(loss), g.param_grads(&grads))
        };
        losses.push(loss);
        adam.step(&mut store, &grads);
    }
    assert!(losses.windows(2).all(|p| p[1] < p[0]), "{losses:?}");
}

#[test]
fn training_loss_matches_evaluation_metric() {
    let prep = fixture();
    let norm = prep.features.normalizer;
    for spec in [small_model(), ModelSpec::StgcnBaseline(BaselineConfig::default())] {
        let model = prep.build_model(&spec, 4).unwrap();
        let windows: Vec<&SampleWindow> = prep.val()[..20].iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (g, loss) = batch_loss(&model, &windows, &norm, Phase::Eval, &mut rng).unwrap();
        let from_loss = g.scalar(loss) * norm.std;
        let metric = evaluate(&model, &prep.val()[..20], &norm, 7).unwrap();
        assert!((from_loss - metric.mae).abs() < 1e-9 * metric.mae, "{from_loss} vs {}", metric.mae);
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let prep = fixture();
    let cfg = quick(2);
    for spec in [small_model(), ModelSpec::StgcnBaseline(BaselineConfig { use_permutation: true, ..Default::default() })] {
        let a = run_single(&prep, &spec, &cfg, 9).unwrap();
        let b = run_single(&prep, &spec, &cfg, 9).unwrap();
        assert_eq!(a.test, b.test);
        assert_eq!(a.val, b.val);
        assert_eq!(a.checkpoint, b.checkpoint);
        let strip = |h: &[suster::training::EpochRecord]| -> Vec<(usize, f64, f64, f64, f64)> {
            h.iter().map(|r| (r.epoch, r.train_mae, r.val_mae, r.val_rmse, r.val_mape)).collect()
        };
        assert_eq!(strip(&a.history), strip(&b.history));
        let c = run_single(&prep, &spec, &cfg, 10).unwrap();
        assert_ne!(a.checkpoint.tensors, c.checkpoint.tensors);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let prep = fixture();
    let norm = prep.features.normalizer;
    let dir = tempfile::tempdir().unwrap();
    for (i, spec) in [
        small_model(),
        ModelSpec::StgcnBaseline(BaselineConfig { use_random_adjacency: true, ..Default::default() }),
    ]
    .into_iter()
    .enumerate()
    {
        let run = run_single(&prep, &spec, &quick(1), 2).unwrap();
        let path = dir.path().join(format!("ckpt{i}.json"));
        run.checkpoint.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, run.checkpoint);
        let model = loaded.restore().unwrap();
        let original = run.checkpoint.restore().unwrap();
        let a = predict_all(&model, prep.test(), &norm, 32).unwrap();
        let b = predict_all(&original, prep.test(), &norm, 32).unwrap();
        assert_eq!(a, b);
        assert_eq!(evaluate(&model, prep.test(), &norm, 32).unwrap(), run.test);
    }
}

#[test]
fn checkpoint_with_wrong_shape_is_rejected() {
    let prep = fixture();
    let run = run_single(&prep, &small_model(), &quick(1), 2).unwrap();
    let mut bad = run.checkpoint.clone();
    let t: &mut TensorRecord = &mut bad.tensors[0];
    t.shape = [t.shape[0] + 1, t.shape[1]];
    t.data.extend(std::iter::repeat_n(0.0, t.shape[1]));
    assert!(bad.restore().is_err());
    let mut missing = run.checkpoint.clone();
    missing.tensors.pop();
    assert!(missing.restore().is_err());
}

#[test]
fn non_finite_loss_names_the_batch() {
    let prep = fixture();
    let norm = prep.features.normalizer;
    for spec in [small_model(), ModelSpec::StgcnBaseline(BaselineConfig::default())] {
        let mut model = prep.build_model(&spec, 1).unwrap();
        let ids: Vec<_> = model.params().ids().collect();
        for id in ids {
            model.params_mut().value_mut(id).fill(f64::NAN);
        }
        let err = train(&mut model, prep.train(), prep.val(), &norm, &quick(1), 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("batch 0"), "{msg}");
    }
}

#[test]
fn multirun_uses_consecutive_seeds() {
    let prep = fixture();
    let runs = multirun(&prep, &small_model(), &quick(1), 40, 2).unwrap();
    assert_eq!(runs.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![40, 41]);
    let single = multirun(&prep, &small_model(), &quick(1), 40, 1).unwrap();
    assert_eq!(single[0].test, runs[0].test);
    assert!(multirun(&prep, &small_model(), &quick(1), 40, 0).is_err());
}

#[test]
fn training_reduces_training_error_and_keeps_best_epoch() {
    let prep = fixture();
    let norm = prep.features.normalizer;
    let mut model = prep.build_model(&small_model(), 6).unwrap();
    let before = evaluate(&model, prep.train(), &norm, 64).unwrap();
    let out = train(&mut model, prep.train(), prep.val(), &norm, &quick(6), 6).unwrap();
    assert_eq!(out.history.len(), 6);
    let best = out.history[out.best_epoch - 1].val_mae;
    assert!(out.history.iter().all(|h| h.val_mae >= best));
    assert_eq!(evaluate(&model, prep.val(), &norm, 64).unwrap().mae, best);

    let first = out.history[0].train_mae;
    let last = out.history[5].train_mae;
    assert!(last < first, "{last} vs {first}");
    assert!(last < before.mae);
    assert!(matches!(model, Forecaster::Suster(_)));
}
