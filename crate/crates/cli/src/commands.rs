//! Subcommand bodies.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use suster::datasets::{load_dense_dataset, sparsify as draw_mask, write_mask_csv, DenseDataset};
use suster::metrics::Metrics;
use suster::pipeline::{lead_time, run_single, ExperimentConfig, Prepared, RunResult};
use suster::stgnn::InnerFactor;
use suster::training::{evaluate, Checkpoint, ModelSpec};

use crate::artifacts::{
    monotonicity_flags, read_csv, read_json, summarize, write_csv, write_history, write_json, write_report,
    ReportRow, SummaryRow,
};
use crate::plot::{dropout_axis, line_chart, series_by_model, Chart, Series};
use crate::{load_config, AblateArgs, ConfigError, EvalArgs, FractionArgs, Grid, ReportArgs, RunArgs, SparsifyArgs, SweepArgs};

pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_SUMMARY_CSV: &str = "sweep_summary.csv";
pub const SWEEP_PLOT: &str = "sweep_mae.png";
pub const MONOTONICITY_CSV: &str = "monotonicity.csv";
pub const NODES_EMBED_CSV: &str = "ablation_nodes_embed.csv";
pub const FACTOR_CSV: &str = "ablation_factor.csv";
pub const ABLATION_RUNS_CSV: &str = "ablation_runs.csv";
pub const FRACTION_CSV: &str = "fraction.csv";
pub const FRACTION_RUNS_CSV: &str = "fraction_runs.csv";
pub const FRACTION_PLOT: &str = "fraction_mae.png";

pub fn sparsify(data_root: Option<&Path>, args: &SparsifyArgs) -> Result<()> {
    let input = args
        .input
        .as_deref()
        .or(data_root)
        .ok_or_else(|| ConfigError("no dataset: pass --input or set SUSTER_DATA_DIR".into()))?;
    if !(0.0..=1.0).contains(&args.dropout) {
        return Err(ConfigError(format!("--dropout must lie in [0, 1], got {}", args.dropout)).into());
    }
    let dataset = load_dense_dataset(input)?;
    let mask = draw_mask(&dataset, args.dropout, args.seed)?;
    let out = args.out.clone().unwrap_or_else(|| input.join("mask.csv"));
    write_mask_csv(&mask, &out)?;
    println!("wrote {} ({}x{})", out.display(), dataset.n(), dataset.k());
    println!("keep rate {:.6} (expected {:.6})", mask.keep_rate(), 1.0 - args.dropout);
    Ok(())
}

/// Loads the dataset once and memoizes prepared splits.
struct Workspace<'a> {
    config: &'a ExperimentConfig,
    data_root: Option<&'a Path>,
    dataset: Option<DenseDataset>,
    prepared: HashMap<String, Rc<Prepared>>,
}

impl<'a> Workspace<'a> {
    fn new(config: &'a ExperimentConfig, data_root: Option<&'a Path>) -> Self {
        Self {
            config,
            data_root,
            dataset: None,
            prepared: HashMap::new(),
        }
    }

    /// Splits for a cell config (single dropout).
    fn prepared(&mut self, cell: &ExperimentConfig) -> Result<Rc<Prepared>> {
        let dropout = cell.dropouts[0];
        let lead = lead_time(&cell.models[0]);
        let key = format!("{dropout:?}/{lead}/{:?}", cell.split);
        if let Some(p) = self.prepared.get(&key) {
            return Ok(Rc::clone(p));
        }
        if self.dataset.is_none() {
            self.dataset = Some(self.config.dataset.load(self.data_root).context("loading dataset")?);
        }
        let dataset = self.dataset.clone().expect("loaded above");
        let p = Rc::new(Prepared::new(dataset, dropout, cell.mask_seed, lead, &cell.split)?);
        self.prepared.insert(key, Rc::clone(&p));
        Ok(p)
    }
}

/// Single-model, single-dropout, single-seed view of a config.
fn cell_config(base: &ExperimentConfig, model: &ModelSpec, dropout: f64, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        dropouts: vec![dropout],
        models: vec![model.clone()],
        n_runs: 1,
        seed,
        ..base.clone()
    }
}

fn model_label(spec: &ModelSpec) -> String {
    match spec {
        ModelSpec::Suster(_) => "suster".into(),
        ModelSpec::StgcnBaseline(c) => c.label(),
    }
}

/// Persisted outcome of one cell; wall-clock time lives in `timing.json`
/// so that reruns reproduce this file exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub model: String,
    pub dropout: f64,
    pub seed: u64,
    pub best_epoch: usize,
    pub val: Metrics,
    pub test: Metrics,
}

impl CellResult {
    fn from_run(run: &RunResult, dropout: f64) -> Self {
        Self {
            model: run.label.clone(),
            dropout,
            seed: run.seed,
            best_epoch: run.best_epoch,
            val: run.val,
            test: run.test,
        }
    }
}

/// Runs a cell unless `dir` already holds a result for the identical config.
fn run_cell(ws: &mut Workspace, dir: &Path, cell: &ExperimentConfig) -> Result<CellResult> {
    let config_path = dir.join("config.json");
    let result_path = dir.join("result.json");
    if result_path.exists() && config_path.exists() {
        if let Ok(saved) = read_json::<ExperimentConfig>(&config_path) {
            if saved == *cell {
                return read_json(&result_path);
            }
        }
    }
    let prepared = ws.prepared(cell)?;
    eprintln!("running {}", dir.display());
    let run = run_single(&prepared, &cell.models[0], &cell.train, cell.seed)
        .with_context(|| format!("cell {}", dir.display()))?;
    let result = CellResult::from_run(&run, cell.dropouts[0]);
    write_json(&config_path, cell)?;
    write_history(&dir.join("history.csv"), &run.history)?;
    write_json(&dir.join("timing.json"), &serde_json::json!({ "seconds": run.seconds }))?;
    write_json(&result_path, &result)?;
    Ok(result)
}

fn resolve_dropout(cfg: &ExperimentConfig, flag: Option<f64>) -> Result<f64> {
    let p = match flag {
        Some(p) => p,
        None => *cfg
            .dropouts
            .first()
            .ok_or_else(|| ConfigError("dropouts: at least one rate is required".into()))?,
    };
    if !(0.0..=1.0).contains(&p) {
        return Err(ConfigError(format!("dropout must lie in [0, 1], got {p}")).into());
    }
    Ok(p)
}

fn naive_rows(prepared: &Prepared, dropout: f64, seed: u64, split: &str) -> Result<Vec<ReportRow>> {
    let windows = prepared.split(split).expect("known split name");
    let naive = prepared.naive_metrics(windows)?;
    Ok(vec![
        ReportRow::new("climatology", dropout, seed, split, naive.climatology),
        ReportRow::new("carry_forward", dropout, seed, split, naive.carry_forward),
    ])
}

/// Files written by `train`.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub run: RunResult,
    pub report: Vec<ReportRow>,
}

pub fn train(data_root: Option<&Path>, args: &RunArgs) -> Result<TrainOutputs> {
    let cfg = load_config(&args.config, args.seed)?;
    let dropout = resolve_dropout(&cfg, args.dropout)?;
    let cell = cell_config(&cfg, &cfg.models[0], dropout, cfg.seed);
    let mut ws = Workspace::new(&cfg, data_root);
    let prepared = ws.prepared(&cell)?;
    let run = run_single(&prepared, &cell.models[0], &cell.train, cell.seed)?;

    let out = &args.out;
    write_json(&out.join("config.json"), &cell)?;
    run.checkpoint.save(out.join("checkpoint.json"))?;
    write_history(&out.join("history.csv"), &run.history)?;
    let mut report = vec![
        ReportRow::new(&run.label, dropout, run.seed, "val", run.val),
        ReportRow::new(&run.label, dropout, run.seed, "test", run.test),
    ];
    for split in ["val", "test"] {
        report.extend(naive_rows(&prepared, dropout, run.seed, split)?);
    }
    write_report(&out.join("report.csv"), &report)?;
    println!(
        "{} dropout {dropout} seed {}: best epoch {}, test MAE {:.4} RMSE {:.4} MAPE {:.4}",
        run.label, run.seed, run.best_epoch, run.test.mae, run.test.rmse, run.test.mape
    );
    Ok(TrainOutputs { run, report })
}

pub fn eval(data_root: Option<&Path>, args: &EvalArgs) -> Result<Vec<ReportRow>> {
    let cfg = load_config(&args.config, args.seed)?;
    let dropout = resolve_dropout(&cfg, args.dropout)?;
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let model = checkpoint.restore()?;
    let cell = cell_config(&cfg, &checkpoint.model, dropout, cfg.seed);
    let mut ws = Workspace::new(&cfg, data_root);
    let prepared = ws.prepared(&cell)?;
    if prepared.features.normalizer != checkpoint.normalizer {
        return Err(ConfigError(format!(
            "checkpoint was trained with speed statistics {:?}, the configured data gives {:?}",
            checkpoint.normalizer, prepared.features.normalizer
        ))
        .into());
    }
    let label = model.label();
    let mut report = Vec::new();
    for split in ["val", "test"] {
        let windows = prepared.split(split).expect("known split name");
        let m = evaluate(&model, windows, &checkpoint.normalizer, cfg.train.eval_batch_size)?;
        println!("{label} {split}: MAE {:.4} RMSE {:.4} MAPE {:.4}", m.mae, m.rmse, m.mape);
        report.push(ReportRow::new(&label, dropout, cfg.seed, split, m));
    }
    write_report(&args.out.join("report.csv"), &report)?;
    Ok(report)
}

fn fmt_rate(p: f64) -> String {
    format!("{p}").replace('.', "_")
}

/// Labels made unique by position when two configured models share one.
fn unique_labels(models: &[ModelSpec]) -> Vec<String> {
    let labels: Vec<String> = models.iter().map(model_label).collect();
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            if labels.iter().filter(|m| *m == l).count() > 1 {
                format!("{l}_{i}")
            } else {
                l.clone()
            }
        })
        .collect()
}

pub fn sweep(data_root: Option<&Path>, args: &SweepArgs) -> Result<Vec<SummaryRow>> {
    let cfg = load_config(&args.config, args.seed)?;
    let mut ws = Workspace::new(&cfg, data_root);
    let labels = unique_labels(&cfg.models);
    let mut rows = Vec::new();
    for &dropout in &cfg.dropouts {
        for (model, label) in cfg.models.iter().zip(&labels) {
            for seed in cfg.seed..cfg.seed + cfg.n_runs as u64 {
                let cell = cell_config(&cfg, model, dropout, seed);
                let dir = args.out.join("cells").join(format!("{label}-p{}-s{seed}", fmt_rate(dropout)));
                let r = run_cell(&mut ws, &dir, &cell)?;
                rows.push(ReportRow::new(label, dropout, seed, "test", r.test));
            }
        }
        if !args.no_naive {
            let cell = cell_config(&cfg, &cfg.models[0], dropout, cfg.seed);
            let prepared = ws.prepared(&cell)?;
            rows.extend(naive_rows(&prepared, dropout, cfg.seed, "test")?);
        }
    }
    write_report(&args.out.join(SWEEP_CSV), &rows)?;
    let summary = summarize(&rows);
    write_csv(&args.out.join(SWEEP_SUMMARY_CSV), &summary)?;
    let flags = monotonicity_flags(&summary);
    write_monotonicity(&args.out.join(MONOTONICITY_CSV), &summary, &flags)?;
    for (model, detail) in &flags {
        println!("note: {model} error falls as dropout rises: {detail}");
    }
    print_summary(&summary);
    plot_or_warn(sweep_plot(&args.out));
    Ok(summary)
}

#[derive(Serialize)]
struct MonotonicityRow<'a> {
    model: &'a str,
    decreasing: bool,
    detail: &'a str,
}

fn write_monotonicity(path: &Path, summary: &[SummaryRow], flags: &[(String, String)]) -> Result<()> {
    let mut models: Vec<&str> = Vec::new();
    for s in summary {
        if !models.contains(&s.model.as_str()) {
            models.push(&s.model);
        }
    }
    let rows: Vec<MonotonicityRow> = models
        .iter()
        .map(|m| {
            let flag = flags.iter().find(|(f, _)| f == m);
            MonotonicityRow {
                model: m,
                decreasing: flag.is_some(),
                detail: flag.map(|(_, d)| d.as_str()).unwrap_or(""),
            }
        })
        .collect();
    write_csv(path, &rows)
}

fn print_summary(summary: &[SummaryRow]) {
    println!("{:<16} {:>8} {:>5} {:>16} {:>16} {:>16}", "model", "dropout", "runs", "mae", "rmse", "mape");
    for s in summary {
        println!(
            "{:<16} {:>8} {:>5} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4}",
            s.model, s.dropout, s.runs, s.mae_mean, s.mae_std, s.rmse_mean, s.rmse_std, s.mape_mean, s.mape_std
        );
    }
}

fn plot_or_warn(result: Result<PathBuf>) {
    match result {
        Ok(path) => println!("wrote {}", path.display()),
        Err(e) => eprintln!("warning: plot skipped: {e:#}"),
    }
}

/// MAE against dropout, rebuilt from the summary CSV.
pub fn sweep_plot(out: &Path) -> Result<PathBuf> {
    let summary: Vec<SummaryRow> = read_csv(&out.join(SWEEP_SUMMARY_CSV))?;
    let series = series_by_model(&summary, |r| dropout_axis(r.dropout));
    let path = out.join(SWEEP_PLOT);
    let chart = Chart {
        title: "Test MAE by dropout rate",
        x_label: "dropout rate (log scale of 1 - rate)",
        y_label: "MAE",
        log_dropout_axis: true,
    };
    line_chart(&path, &chart, &series)?;
    Ok(path)
}

/// Row of the factor ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorRow {
    pub factor: String,
    pub runs: usize,
    pub mae: f64,
    pub mae_std: f64,
    pub rmse: f64,
    pub rmse_std: f64,
    pub mape: f64,
    pub mape_std: f64,
}

/// Output of `ablate`: the table as written plus per-run rows.
#[derive(Clone, Debug)]
pub struct Ablation {
    pub header: Vec<String>,
    pub table: Vec<Vec<String>>,
    pub runs: Vec<ReportRow>,
}

pub fn ablate(data_root: Option<&Path>, args: &AblateArgs) -> Result<Ablation> {
    let cfg = load_config(&args.config, args.seed)?;
    let dropout = resolve_dropout(&cfg, None)?;
    let base = cfg
        .models
        .iter()
        .find_map(|m| match m {
            ModelSpec::Suster(c) => Some(c.clone()),
            ModelSpec::StgcnBaseline(_) => None,
        })
        .ok_or_else(|| ConfigError("models: ablations need a `suster` model".into()))?;
    let mut ws = Workspace::new(&cfg, data_root);
    let seeds = cfg.seed..cfg.seed + cfg.n_runs as u64;
    let mut runs = Vec::new();
    let mut run_variant = |ws: &mut Workspace, name: &str, spec: ModelSpec| -> Result<Vec<Metrics>> {
        let mut metrics = Vec::new();
        for seed in seeds.clone() {
            let cell = cell_config(&cfg, &spec, dropout, seed);
            let dir = args.out.join("cells").join(format!("{name}-p{}-s{seed}", fmt_rate(dropout)));
            let r = run_cell(ws, &dir, &cell)?;
            runs.push(ReportRow::new(name, dropout, seed, "test", r.test));
            metrics.push(r.test);
        }
        Ok(metrics)
    };

    let (header, table, path) = match args.grid {
        Grid::NodesEmbed => {
            if args.nodes.is_empty() || args.embeds.is_empty() {
                return Err(ConfigError("ablation grid is empty".into()).into());
            }
            let mut header = vec!["num_nodes".to_string()];
            header.extend(args.embeds.iter().map(|e| format!("embed_{e}")));
            let mut table = Vec::new();
            for &v in &args.nodes {
                let mut line = vec![v.to_string()];
                for &d in &args.embeds {
                    let spec = ModelSpec::Suster(suster::model::ModelConfig {
                        num_nodes: v,
                        embed_dim: d,
                        ..base.clone()
                    });
                    let m = run_variant(&mut ws, &format!("suster_v{v}_d{d}"), spec)?;
                    line.push(format!("{}", SummaryRow::of("", dropout, &m).mae_mean));
                }
                table.push(line);
            }
            (header, table, args.out.join(NODES_EMBED_CSV))
        }
        Grid::Factor => {
            if args.factors.is_empty() {
                return Err(ConfigError("ablation grid is empty".into()).into());
            }
            let header: Vec<String> = ["factor", "runs", "mae", "mae_std", "rmse", "rmse_std", "mape", "mape_std"]
                .map(String::from)
                .to_vec();
            let mut table = Vec::new();
            for &f in &args.factors {
                let spec = ModelSpec::Suster(suster::model::ModelConfig {
                    stgnn_factor: f,
                    ..base.clone()
                });
                let name = format!("suster_f{}", factor_name(f));
                let m = run_variant(&mut ws, &name, spec)?;
                let s = SummaryRow::of("", dropout, &m);
                table.push(vec![
                    factor_name(f),
                    s.runs.to_string(),
                    s.mae_mean.to_string(),
                    s.mae_std.to_string(),
                    s.rmse_mean.to_string(),
                    s.rmse_std.to_string(),
                    s.mape_mean.to_string(),
                    s.mape_std.to_string(),
                ]);
            }
            (header, table, args.out.join(FACTOR_CSV))
        }
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for line in &table {
        w.write_record(line)?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("flushing csv: {e}"))?;
    crate::artifacts::write_atomic(&path, &bytes)?;
    write_report(&args.out.join(ABLATION_RUNS_CSV), &runs)?;
    println!("{}", header.join("\t"));
    for line in &table {
        println!("{}", line.join("\t"));
    }
    println!("wrote {}", path.display());
    Ok(Ablation { header, table, runs })
}

fn factor_name(f: InnerFactor) -> String {
    match f {
        InnerFactor::Scaled(v) => format!("{v}"),
        InnerFactor::Average => "none".into(),
    }
}

/// Row of the training-fraction table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractionRow {
    pub fraction: f64,
    pub model: String,
    pub runs: usize,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub mape_mean: f64,
    pub mape_std: f64,
}

pub fn fraction(data_root: Option<&Path>, args: &FractionArgs) -> Result<Vec<FractionRow>> {
    let cfg = load_config(&args.config, args.seed)?;
    if args.fractions.is_empty() {
        return Err(ConfigError("no fractions given".into()).into());
    }
    if let Some(f) = args.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(ConfigError(format!("fraction {f} is outside (0, 1]")).into());
    }
    let dropout = resolve_dropout(&cfg, None)?;
    let model = &cfg.models[0];
    let label = model_label(model);
    let mut ws = Workspace::new(&cfg, data_root);
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &f in &args.fractions {
        let mut metrics = Vec::new();
        for seed in cfg.seed..cfg.seed + cfg.n_runs as u64 {
            let mut cell = cell_config(&cfg, model, dropout, seed);
            cell.split = cell.split.with_subfraction(f);
            let dir = args
                .out
                .join("cells")
                .join(format!("{label}-p{}-f{}-s{seed}", fmt_rate(dropout), fmt_rate(f)));
            let r = run_cell(&mut ws, &dir, &cell)?;
            runs.push(ReportRow::new(&label, dropout, seed, "test", r.test));
            metrics.push(r.test);
        }
        let s = SummaryRow::of(&label, dropout, &metrics);
        rows.push(FractionRow {
            fraction: f,
            model: label.clone(),
            runs: s.runs,
            mae_mean: s.mae_mean,
            mae_std: s.mae_std,
            rmse_mean: s.rmse_mean,
            rmse_std: s.rmse_std,
            mape_mean: s.mape_mean,
            mape_std: s.mape_std,
        });
    }
    write_csv(&args.out.join(FRACTION_CSV), &rows)?;
    write_report(&args.out.join(FRACTION_RUNS_CSV), &runs)?;
    for r in &rows {
        println!("fraction {:.2}: MAE {:.4} ± {:.4}", r.fraction, r.mae_mean, r.mae_std);
    }
    plot_or_warn(fraction_plot(&args.out));
    Ok(rows)
}

pub fn fraction_plot(out: &Path) -> Result<PathBuf> {
    let rows: Vec<FractionRow> = read_csv(&out.join(FRACTION_CSV))?;
    let mut series: Vec<Series> = Vec::new();
    for r in &rows {
        match series.iter_mut().find(|s| s.name == r.model) {
            Some(s) => s.points.push((r.fraction, r.mae_mean)),
            None => series.push(Series {
                name: r.model.clone(),
                points: vec![(r.fraction, r.mae_mean)],
            }),
        }
    }
    let path = out.join(FRACTION_PLOT);
    let chart = Chart {
        title: "Test MAE by share of training data",
        x_label: "fraction of training windows",
        y_label: "MAE",
        log_dropout_axis: false,
    };
    line_chart(&path, &chart, &series)?;
    Ok(path)
}

pub fn report(args: &ReportArgs) -> Result<()> {
    let out = &args.out;
    if !out.is_dir() {
        return Err(ConfigError(format!("{} is not a directory", out.display())).into());
    }
    let mut found = false;
    if out.join(SWEEP_SUMMARY_CSV).exists() {
        found = true;
        let summary: Vec<SummaryRow> = read_csv(&out.join(SWEEP_SUMMARY_CSV))?;
        print_summary(&summary);
        plot_or_warn(sweep_plot(out));
    }
    if out.join(FRACTION_CSV).exists() {
        found = true;
        let rows: Vec<FractionRow> = read_csv(&out.join(FRACTION_CSV))?;
        for r in &rows {
            println!("fraction {:.2}: MAE {:.4} ± {:.4}", r.fraction, r.mae_mean, r.mae_std);
        }
        plot_or_warn(fraction_plot(out));
    }
    for name in [NODES_EMBED_CSV, FACTOR_CSV, "report.csv"] {
        let path = out.join(name);
        if path.exists() {
            found = true;
            println!("{name}:");
            print!("{}", std::fs::read_to_string(&path)?);
        }
    }
    if !found {
        bail!("no result files in {}", out.display());
    }
    Ok(())
}
