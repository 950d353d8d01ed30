use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use suster_cli::artifacts::{read_csv, ReportRow, SummaryRow};
use suster_cli::commands::{self, FractionRow};
use suster_cli::{FractionArgs, RunArgs, SweepArgs, EXIT_CONFIG, EXIT_RUNTIME};

const DATASET: &str = r#"{"synth": {"k": 6, "n": 400, "clusters": 2, "noise": 2.0, "seed": 3, "interval_minutes": 15}}"#;

fn config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn small_config(dir: &Path, models: &str, dropouts: &str, n_runs: usize) -> PathBuf {
    config(
        dir,
        "config.json",
        &format!(
            r#"{{"dataset": {DATASET}, "dropouts": {dropouts}, "models": {models},
                "train": {{"epochs": 1, "batch_size": 16}}, "n_runs": {n_runs}, "seed": 2}}"#
        ),
    )
}

const SUSTER: &str = r#"{"kind": "suster", "config": {"num_nodes": 3, "embed_dim": 4}}"#;
const BASELINE: &str = r#"{"kind": "stgcn_baseline", "config": {"use_random_adjacency": true, "use_permutation": true}}"#;

fn suster_bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_suster"))
        .args(args)
        .env_remove("SUSTER_DATA_DIR")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_checkpoint_history_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), &format!("[{SUSTER}]"), "[0.8]", 1);
    let out = dir.path().join("run");
    let res = suster_bin(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for f in ["checkpoint.json", "history.csv", "report.csv", "config.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let report: Vec<ReportRow> = read_csv(&out.join("report.csv")).unwrap();
    let models: Vec<&str> = report.iter().map(|r| r.model.as_str()).collect();
    assert_eq!(models, ["suster", "suster", "climatology", "carry_forward", "climatology", "carry_forward"]);
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_mae,val_mae,val_rmse,val_mape,seconds"));
    assert_eq!(history.lines().count(), 2);
}

#[test]
fn baseline_label_names_modifications() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), &format!("[{BASELINE}]"), "[0.8]", 1);
    let res = commands::train(
        None,
        &RunArgs {
            config: cfg,
            out: dir.path().join("run"),
            seed: None,
            dropout: None,
        },
    )
    .unwrap();
    assert_eq!(res.run.label, "stgcn_adj_perm");
    assert_eq!(res.report[0].model, "stgcn_adj_perm");
}

#[test]
fn unknown_model_kind_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), r#"[{"kind": "transformer", "config": {}}]"#, "[0.8]", 1);
    let res = suster_bin(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(res.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&res.stderr).contains("transformer"));
}

#[test]
fn every_config_problem_is_listed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "bad.json",
        &format!(r#"{{"dataset": {DATASET}, "dropouts": [1.5], "models": [{SUSTER}], "train": {{"epochs": 0}}, "n_runs": 0}}"#),
    );
    let res = suster_bin(&["sweep", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(res.status.code(), Some(EXIT_CONFIG));
    let err = String::from_utf8_lossy(&res.stderr);
    for key in ["dropouts[0]", "train: epochs", "n_runs"] {
        assert!(err.contains(key), "{key} missing from: {err}");
    }
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "c.json",
        &format!(r#"{{"dataset": {{"path": "{}"}}, "models": [{SUSTER}]}}"#, s(&dir.path().join("nowhere"))),
    );
    let res = suster_bin(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(res.status.code(), Some(EXIT_RUNTIME));
}

#[test]
fn sparsify_reports_keep_rate_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut sc = suster::datasets::SynthConfig::new(10, 300, 2, 1.0, 1);
    sc.interval_minutes = 15;
    let data = dir.path().join("data");
    suster::datasets::save_dense_dataset(&suster::datasets::synth_generate(&sc).unwrap(), &data).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let res = suster_bin(&["sparsify", "--input", s(&data), "--dropout", "0.5", "--seed", "9", "--out", s(&out)]);
        assert!(res.status.success());
        (String::from_utf8_lossy(&res.stdout).into_owned(), std::fs::read(out).unwrap())
    };
    let (stdout, a) = run("a.csv");
    let (_, b) = run("b.csv");
    assert!(stdout.contains("keep rate"), "{stdout}");
    assert_eq!(a, b);
    let res = suster_bin(&["sparsify", "--input", s(&data), "--dropout", "1.5"]);
    assert_eq!(res.status.code(), Some(EXIT_CONFIG));
}

#[test]
fn sweep_counts_runs_and_resumes_cells_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), &format!("[{SUSTER}, {BASELINE}]"), "[0.5, 0.9]", 2);
    let out = dir.path().join("sweep");
    let args = SweepArgs {
        config: cfg,
        out: out.clone(),
        seed: None,
        no_naive: true,
    };
    let summary = commands::sweep(None, &args).unwrap();
    let rows: Vec<ReportRow> = read_csv(&out.join(commands::SWEEP_CSV)).unwrap();
    assert_eq!(rows.len(), 8);
    assert_eq!(summary.len(), 4);
    assert!(summary.iter().all(|r| r.runs == 2));
    let on_disk: Vec<SummaryRow> = read_csv(&out.join(commands::SWEEP_SUMMARY_CSV)).unwrap();
    assert_eq!(on_disk, summary);
    assert!(out.join(commands::SWEEP_PLOT).is_file());

    let cells = out.join("cells");
    let mut names: Vec<String> = std::fs::read_dir(&cells)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 8);
    let victim = cells.join(&names[0]);
    let before = std::fs::read(victim.join("result.json")).unwrap();
    let untouched = cells.join(&names[1]).join("timing.json");
    let untouched_before = std::fs::read(&untouched).unwrap();
    let sweep_before = std::fs::read(out.join(commands::SWEEP_CSV)).unwrap();

    std::fs::remove_dir_all(&victim).unwrap();
    commands::sweep(None, &args).unwrap();
    assert_eq!(std::fs::read(victim.join("result.json")).unwrap(), before);
    assert_eq!(std::fs::read(&untouched).unwrap(), untouched_before, "finished cell was rerun");
    assert_eq!(std::fs::read(out.join(commands::SWEEP_CSV)).unwrap(), sweep_before);
}

#[test]
fn sweep_adds_naive_rows_unless_disabled() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), &format!("[{SUSTER}]"), "[0.9]", 1);
    let out = dir.path().join("sweep");
    let summary = commands::sweep(
        None,
        &SweepArgs {
            config: cfg,
            out,
            seed: None,
            no_naive: false,
        },
    )
    .unwrap();
    let models: Vec<&str> = summary.iter().map(|r| r.model.as_str()).collect();
    assert!(models.contains(&"climatology") && models.contains(&"carry_forward"), "{models:?}");
}

#[test]
fn full_fraction_matches_train() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), &format!("[{SUSTER}]"), "[0.8]", 1);
    let trained = commands::train(
        None,
        &RunArgs {
            config: cfg.clone(),
            out: dir.path().join("run"),
            seed: None,
            dropout: None,
        },
    )
    .unwrap();
    let rows = commands::fraction(
        None,
        &FractionArgs {
            config: cfg,
            out: dir.path().join("fraction"),
            seed: None,
            fractions: vec![0.5, 1.0],
        },
    )
    .unwrap();
    assert_eq!(rows.len(), 2);
    let full = rows.iter().find(|r| r.fraction == 1.0).unwrap();
    assert_eq!(full.mae_mean, trained.run.test.mae);
    let on_disk: Vec<FractionRow> = read_csv(&dir.path().join("fraction").join(commands::FRACTION_CSV)).unwrap();
    assert_eq!(on_disk, rows);
}

#[test]
fn report_rebuilds_from_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), &format!("[{SUSTER}]"), "[0.5, 0.9]", 1);
    let out = dir.path().join("sweep");
    commands::sweep(
        None,
        &SweepArgs {
            config: cfg,
            out: out.clone(),
            seed: None,
            no_naive: true,
        },
    )
    .unwrap();
    std::fs::remove_file(out.join(commands::SWEEP_PLOT)).unwrap();
    let res = suster_bin(&["report", "--out", s(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(out.join(commands::SWEEP_PLOT).is_file());
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(suster_bin(&["report", "--out", s(&empty)]).status.code(), Some(EXIT_RUNTIME));
}
