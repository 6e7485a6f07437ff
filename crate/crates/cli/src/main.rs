//! Command-line surface for the forecasting workbench.
//!
//! Subcommands: `inspect` a `.tsf` file, `train` one manifest config,
//! `sweep` a manifest grid with resume, `evaluate` recorded results,
//! `hpo` against the recorded benchmark, `importance` scores, and
//! `report` for summary/plot-data files. Failures print one
//! machine-readable JSON line on stderr and exit nonzero.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use tsbench::hpo::{self, HpoTrace, RfBoConfig, StrategyKind};
use tsbench::importance::{grid_fanova, prepare_grid, Objective};
use tsbench::metastore::{self, slugify, DatasetMetafeatures, StoreWriter};
use tsbench::model::Shape;
use tsbench::trainer::{self, sweep_grid, TrainConfig, ValidationStrategy};
use tsbench::tsf::{parse_tsf, TimeSeriesDataset};

#[derive(Parser)]
#[command(name = "tsbench", version, about = "Probabilistic MLP forecasting workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print header and shape statistics of a .tsf dataset file.
    Inspect { tsf: PathBuf },
    /// Run a single configuration from a run manifest.
    Train {
        manifest: PathBuf,
        /// Index into the manifest's config list / grid.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Run every configuration in the manifest, resuming past work.
    Sweep { manifest: PathBuf },
    /// Summarize recorded final test metrics for a dataset.
    Evaluate {
        /// Store path (defaults to $TSBENCH_STORE).
        store: Option<PathBuf>,
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value = "mase")]
        metric: String,
    },
    /// Run an HPO strategy against the recorded benchmark.
    Hpo {
        /// Store path (defaults to $TSBENCH_STORE).
        store: Option<PathBuf>,
        #[arg(long)]
        method: String,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Dataset to optimize; defaults to the store's only dataset.
        #[arg(long)]
        dataset: Option<String>,
        /// Search objective (validation side): "nll" or "val.<metric>".
        #[arg(long, default_value = "nll")]
        objective: String,
        /// Final comparison metric.
        #[arg(long, default_value = "test.mase")]
        final_metric: String,
        #[arg(long, default_value_t = 3.0)]
        eta: f64,
        /// Output directory for trace files (default <store>/hpo_traces).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact fANOVA hyperparameter importance from a finished sweep.
    Importance {
        /// Store path (defaults to $TSBENCH_STORE).
        store: Option<PathBuf>,
        #[arg(long)]
        dataset: String,
        /// "nll", "val.<metric>" or "test.<metric>".
        #[arg(long, default_value = "nll")]
        objective: String,
        #[arg(long, default_value_t = 2)]
        order: usize,
        /// Include the seed as a seventh factor.
        #[arg(long)]
        seed_factor: bool,
        /// Output directory (default <store>/reports).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit summary CSVs and plot-data files for everything recorded.
    Report {
        /// Store path (defaults to $TSBENCH_STORE).
        store: Option<PathBuf>,
        /// Output directory (default <store>/reports).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory of hpo trace files to fold into a CD report.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
}

/// On-disk description of a training run or sweep.
#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    dataset: PathBuf,
    store: PathBuf,
    #[serde(default)]
    horizon: Option<usize>,
    #[serde(default)]
    seasonality: Option<usize>,
    #[serde(default = "default_parallelism")]
    parallelism: usize,
    #[serde(default)]
    grid: Option<GridSpec>,
    #[serde(default)]
    configs: Option<Vec<TrainConfig>>,
    #[serde(default)]
    allow_offgrid: bool,
    #[serde(default)]
    epochs: Option<usize>,
    #[serde(default)]
    batches_per_epoch: Option<usize>,
    #[serde(default)]
    batch_size: Option<usize>,
    #[serde(default)]
    forecast_samples: Option<usize>,
    /// Run only a random subsample of the grid.
    #[serde(default)]
    subsample: Option<usize>,
    /// Seed for the subsample draw.
    #[serde(default)]
    sampling_seed: Option<u64>,
}

fn default_parallelism() -> usize {
    1
}

/// Subset of the published grid; absent dimensions use the full grid.
#[derive(Debug, Default, Serialize, Deserialize)]
struct GridSpec {
    #[serde(default)]
    contexts: Option<Vec<usize>>,
    #[serde(default)]
    strategies: Option<Vec<String>>,
    #[serde(default)]
    shapes: Option<Vec<String>>,
    #[serde(default)]
    dist_hidden: Option<Vec<usize>>,
    #[serde(default)]
    learning_rates: Option<Vec<f64>>,
    #[serde(default)]
    weight_decays: Option<Vec<f64>>,
    #[serde(default)]
    seeds: Option<Vec<u64>>,
}

fn main() {
    // Dying quietly on a closed pipe (e.g. `tsbench ... | head`) beats a
    // broken-pipe panic from println.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("{}", serde_json::json!({ "error": format!("{e:#}") }));
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Inspect { tsf } => inspect(&tsf),
        Command::Train { manifest, index } => train(&manifest, index),
        Command::Sweep { manifest } => sweep(&manifest),
        Command::Evaluate { store, dataset, metric } => {
            evaluate(resolve_store(store)?, &dataset, &metric)
        }
        Command::Hpo { store, method, trials, seed, dataset, objective, final_metric, eta, out } => {
            run_hpo(resolve_store(store)?, &method, trials, seed, dataset, &objective, &final_metric, eta, out)
        }
        Command::Importance { store, dataset, objective, order, seed_factor, out } => {
            importance(resolve_store(store)?, &dataset, &objective, order, seed_factor, out)
        }
        Command::Report { store, out, traces } => report(resolve_store(store)?, out, traces),
    }
}

fn resolve_store(arg: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = arg {
        return Ok(p);
    }
    std::env::var_os("TSBENCH_STORE")
        .map(PathBuf::from)
        .ok_or_else(|| anyhow!("no store path given and TSBENCH_STORE is unset"))
}

fn load_dataset(manifest: &RunManifest) -> Result<TimeSeriesDataset> {
    let text = fs::read_to_string(&manifest.dataset)
        .with_context(|| format!("reading {}", manifest.dataset.display()))?;
    let mut ds =
        parse_tsf(&text).with_context(|| format!("parsing {}", manifest.dataset.display()))?;
    if let Some(m) = manifest.seasonality {
        ds.seasonality = m;
    }
    Ok(ds)
}

fn inspect(path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let ds = parse_tsf(&text)?;
    println!("name={}", ds.name);
    println!("freq={}", ds.frequency.as_str());
    println!("horizon={}", ds.horizon);
    println!("seasonality={}", ds.seasonality);
    println!("series={}", ds.series.len());
    println!("min_len={}", ds.min_len());
    println!("max_len={}", ds.max_len());
    println!("equal_length={}", ds.equal_length);
    println!("missing={}", ds.contains_missing);
    Ok(())
}

fn parse_manifest(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
}

fn build_grid(manifest: &RunManifest, ds: &TimeSeriesDataset) -> Result<Vec<TrainConfig>> {
    let mut grid: Vec<TrainConfig> = if let Some(configs) = &manifest.configs {
        configs.clone()
    } else {
        let spec = manifest.grid.as_ref();
        let contexts = spec
            .and_then(|g| g.contexts.clone())
            .unwrap_or_else(|| trainer::CONTEXT_GRID.to_vec());
        let strategies: Vec<ValidationStrategy> = match spec.and_then(|g| g.strategies.clone()) {
            Some(names) => names
                .iter()
                .map(|s| ValidationStrategy::parse(s).ok_or_else(|| anyhow!("unknown strategy {s:?}")))
                .collect::<Result<_>>()?,
            None => trainer::STRATEGY_GRID.to_vec(),
        };
        let shapes: Vec<Shape> = match spec.and_then(|g| g.shapes.clone()) {
            Some(names) => names
                .iter()
                .map(|s| Shape::parse(s).ok_or_else(|| anyhow!("unknown shape {s:?}")))
                .collect::<Result<_>>()?,
            None => Shape::ALL.to_vec(),
        };
        let dist_hidden = spec
            .and_then(|g| g.dist_hidden.clone())
            .unwrap_or_else(|| trainer::DIST_HIDDEN_GRID.to_vec());
        let lrs = spec
            .and_then(|g| g.learning_rates.clone())
            .unwrap_or_else(|| trainer::LEARNING_RATE_GRID.to_vec());
        let wds = spec
            .and_then(|g| g.weight_decays.clone())
            .unwrap_or_else(|| trainer::WEIGHT_DECAY_GRID.to_vec());
        let seeds =
            spec.and_then(|g| g.seeds.clone()).unwrap_or_else(|| trainer::SEED_GRID.to_vec());
        let mut out = Vec::new();
        for &context in &contexts {
            for &strategy in &strategies {
                for &shape in &shapes {
                    for &d in &dist_hidden {
                        for &lr in &lrs {
                            for &wd in &wds {
                                for &seed in &seeds {
                                    out.push(TrainConfig::new(
                                        &ds.name, context, strategy, shape, d, lr, wd, seed,
                                    ));
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    };
    for cfg in &mut grid {
        cfg.dataset = ds.name.clone();
        cfg.horizon_override = manifest.horizon;
        if let Some(v) = manifest.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = manifest.batches_per_epoch {
            cfg.batches_per_epoch = v;
        }
        if let Some(v) = manifest.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = manifest.forecast_samples {
            cfg.forecast_samples = v;
        }
    }
    if let Some(n) = manifest.subsample {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(manifest.sampling_seed.unwrap_or(0));
        grid.shuffle(&mut rng);
        grid.truncate(n);
    }
    if !manifest.allow_offgrid {
        for cfg in &grid {
            let protocol_default = cfg.epochs == 50
                && cfg.batches_per_epoch == 50
                && cfg.batch_size == 64
                && cfg.forecast_samples == 100;
            if !cfg.is_on_grid() || !protocol_default {
                bail!(
                    "config {} is off the published grid; set allow_offgrid to run it",
                    cfg.canonical_string()
                );
            }
        }
    }
    Ok(grid)
}

/// Copy the manifest next to its outputs so every run is reproducible
/// from the store alone.
fn archive_manifest(manifest: &RunManifest, store: &Path, ds: &TimeSeriesDataset) -> Result<()> {
    fs::create_dir_all(store)?;
    let path = store.join(format!("manifest_{}.json", slugify(&ds.name)));
    fs::write(path, serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

fn train(manifest_path: &Path, index: usize) -> Result<()> {
    let manifest = parse_manifest(manifest_path)?;
    let ds = load_dataset(&manifest)?;
    let grid = build_grid(&manifest, &ds)?;
    let cfg = grid
        .get(index)
        .ok_or_else(|| anyhow!("index {index} out of range ({} configs)", grid.len()))?;
    let mut writer = StoreWriter::open(&manifest.store)?;
    archive_manifest(&manifest, &manifest.store, &ds)?;
    if writer.existing_ids(&ds.name).contains(&cfg.config_id()) {
        println!("config={} already recorded; nothing to do", cfg.id_hex());
        return Ok(());
    }
    let horizon = manifest.horizon.unwrap_or(ds.horizon);
    let meta = DatasetMetafeatures::from_dataset(&ds, horizon);
    let result = trainer::run_config(&ds, cfg)?;
    print_result_line(&result);
    writer.append_run(&meta, &result)?;
    Ok(())
}

fn print_result_line(result: &tsbench::RunResult) {
    let status = match &result.status {
        trainer::RunStatus::Complete => "complete".to_string(),
        trainer::RunStatus::Failed { epoch, .. } => format!("failed@{epoch}"),
    };
    let mase = result
        .final_test
        .as_ref()
        .and_then(|r| r.get("mase"))
        .map_or("-".to_string(), |v| format!("{v:.4}"));
    println!(
        "config={} status={} best_epoch={} test_mase={}",
        result.config.id_hex(),
        status,
        result.best_epoch.map_or("-".to_string(), |e| e.to_string()),
        mase
    );
}

fn sweep(manifest_path: &Path) -> Result<()> {
    let manifest = parse_manifest(manifest_path)?;
    let ds = load_dataset(&manifest)?;
    let grid = build_grid(&manifest, &ds)?;
    let mut writer = StoreWriter::open(&manifest.store)?;
    archive_manifest(&manifest, &manifest.store, &ds)?;
    writer.declare_expected(&ds.name, &grid)?;
    let existing = writer.existing_ids(&ds.name);
    let horizon = manifest.horizon.unwrap_or(ds.horizon);
    let meta = DatasetMetafeatures::from_dataset(&ds, horizon);
    let to_run = grid.iter().filter(|c| !existing.contains(&c.config_id())).count();
    println!(
        "sweep dataset={} grid={} done={} todo={} parallelism={}",
        ds.name,
        grid.len(),
        grid.len() - to_run,
        to_run,
        manifest.parallelism
    );
    let writer = Mutex::new(writer);
    let results = sweep_grid(
        &ds,
        &grid,
        manifest.parallelism,
        |cfg| existing.contains(&cfg.config_id()),
        |result| {
            print_result_line(result);
            let mut w = writer.lock().unwrap();
            if let Err(e) = w.append_run(&meta, result) {
                eprintln!("{}", serde_json::json!({ "error": format!("append failed: {e}") }));
            }
        },
    );
    let failed = results.iter().filter(|r| !r.status.is_complete()).count();
    println!("sweep finished new={} failed={}", results.len(), failed);
    drop(writer);
    let store = metastore::load(&manifest.store)?;
    write_sweep_summary(&store, &ds.name, &manifest.store)?;
    let completeness = store.completeness(&ds.name)?;
    println!(
        "store complete={} present={}/{}",
        completeness.is_complete(),
        completeness.present,
        completeness.expected
    );
    Ok(())
}

fn write_sweep_summary(
    store: &metastore::Metadataset,
    dataset: &str,
    store_path: &Path,
) -> Result<()> {
    let records = store.dataset(dataset).ok_or_else(|| anyhow!("dataset missing after sweep"))?;
    let mut csv =
        String::from("config_id,status,best_epoch,test_mase,test_crps,param_count,runtime_secs\n");
    for c in &records.configs {
        let (mase, crps) = c
            .final_test
            .as_ref()
            .map(|r| (format!("{}", r.mase), format!("{}", r.crps_proxy)))
            .unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            c.config_id,
            c.status,
            c.best_epoch.map_or(String::new(), |e| e.to_string()),
            mase,
            crps,
            c.param_count,
            c.total_runtime_secs,
        ));
    }
    let path = store_path.join(format!("sweep_summary_{}.csv", slugify(dataset)));
    fs::write(&path, csv)?;
    println!("summary={}", path.display());
    Ok(())
}

fn evaluate(store: PathBuf, dataset: &str, metric: &str) -> Result<()> {
    let meta = metastore::load(&store)?;
    let records = meta
        .dataset(dataset)
        .ok_or_else(|| anyhow!("dataset {dataset:?} not in store"))?;
    let complete = records.configs.iter().filter(|c| c.is_complete()).count();
    let failed = records.configs.len() - complete;
    println!("dataset={dataset} metric={metric} complete={complete} failed={failed}");
    let mut values: Vec<f64> = records
        .configs
        .iter()
        .filter_map(|c| c.final_test.as_ref().and_then(|r| r.get(metric)))
        .filter(|v| v.is_finite())
        .collect();
    if values.is_empty() {
        bail!("no finite {metric:?} values recorded for {dataset:?}");
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (best_cfg, best) = meta.best_final(dataset, metric).expect("nonempty");
    println!(
        "best value={:.6} config={} context={} strategy={} shape={} d={} lr={} wd={} seed={}",
        best,
        best_cfg.config_id,
        best_cfg.config.context,
        best_cfg.config.strategy.as_str(),
        best_cfg.config.shape.as_str(),
        best_cfg.config.dist_hidden,
        best_cfg.config.learning_rate,
        best_cfg.config.weight_decay,
        best_cfg.config.seed
    );
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    println!(
        "mean={:.6} median={:.6} worst={:.6} n={}",
        mean,
        values[values.len() / 2],
        values[values.len() - 1],
        values.len()
    );
    Ok(())
}

/// Trace file with enough metadata to group into a CD report later.
#[derive(Serialize, Deserialize)]
struct TraceFile {
    dataset: String,
    method: String,
    seed: u64,
    trials: usize,
    objective: String,
    final_metric: String,
    trace: HpoTrace,
}

#[allow(clippy::too_many_arguments)]
fn run_hpo(
    store: PathBuf,
    method: &str,
    trials: usize,
    seed: u64,
    dataset: Option<String>,
    objective: &str,
    final_metric: &str,
    eta: f64,
    out: Option<PathBuf>,
) -> Result<()> {
    let kind = StrategyKind::parse(method)
        .ok_or_else(|| anyhow!("unknown method {method:?} (random, sh, hyperband, rfbo)"))?;
    let meta = metastore::load(&store)?;
    let dataset = match dataset {
        Some(d) => d,
        None => {
            let mut names: Vec<String> = meta.datasets.keys().cloned().collect();
            if names.len() != 1 {
                bail!("store holds {} datasets; pass --dataset", names.len());
            }
            names.remove(0)
        }
    };
    let bench = meta.to_tabular_benchmark(&dataset, objective, final_metric, true)?;
    let trace = hpo::run_strategy(&bench, kind, trials, seed, eta, &RfBoConfig::default());
    println!(
        "method={} dataset={} budget_trials={} evals={} epochs={} incumbent={} objective={:.6} final={:.6}",
        kind.as_str(),
        dataset,
        trials,
        trace.trials_consumed,
        trace.epochs_consumed,
        trace.incumbent_config.map_or("-".to_string(), |id| format!("{id:016x}")),
        trace.incumbent_objective,
        trace.final_test_objective
    );
    let out_dir = out.unwrap_or_else(|| store.join("hpo_traces"));
    fs::create_dir_all(&out_dir)?;
    let file = TraceFile {
        dataset: slugify(&dataset),
        method: kind.as_str().to_string(),
        seed,
        trials,
        objective: objective.to_string(),
        final_metric: final_metric.to_string(),
        trace,
    };
    let base = format!("{}__{}__seed{}", file.dataset, file.method, seed);
    let json_path = out_dir.join(format!("{base}.json"));
    fs::write(&json_path, serde_json::to_string_pretty(&file)?)?;
    let steps_path = out_dir.join(format!("{base}.steps.jsonl"));
    let mut lines = String::new();
    for step in &file.trace.steps {
        lines.push_str(&serde_json::to_string(step)?);
        lines.push('\n');
    }
    fs::write(&steps_path, lines)?;
    println!("trace={} steps={}", json_path.display(), steps_path.display());
    Ok(())
}

fn importance(
    store: PathBuf,
    dataset: &str,
    objective: &str,
    order: usize,
    seed_factor: bool,
    out: Option<PathBuf>,
) -> Result<()> {
    let meta = metastore::load(&store)?;
    let objective = Objective::parse(objective)?;
    let table = prepare_grid(&meta, dataset, &objective, seed_factor)?;
    let report = grid_fanova(&table, order)?;
    let mut ranked: Vec<(String, f64)> =
        report.factors.iter().cloned().zip(report.main.iter().copied()).collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    for (name, share) in &ranked {
        println!("importance {name}={share:.4}");
    }
    for p in &report.pairwise {
        if p.importance > 0.01 {
            println!(
                "interaction {}x{}={:.4}",
                report.factors[p.factors.0], report.factors[p.factors.1], p.importance
            );
        }
    }
    println!("residual={:.4} total_variance={:.6e}", report.residual, report.total_variance);
    let out_dir = out.unwrap_or_else(|| store.join("reports"));
    fs::create_dir_all(&out_dir)?;
    let slug = slugify(dataset);
    fs::write(
        out_dir.join(format!("{slug}_importance.json")),
        serde_json::to_string_pretty(&report)?,
    )?;
    let mut csv = String::from("factor,importance\n");
    for (name, share) in &ranked {
        csv.push_str(&format!("{name},{share}\n"));
    }
    fs::write(out_dir.join(format!("{slug}_importance.csv")), csv)?;
    Ok(())
}

fn report(store: PathBuf, out: Option<PathBuf>, traces: Option<PathBuf>) -> Result<()> {
    let meta = metastore::load(&store)?;
    let out_dir = out.unwrap_or_else(|| store.join("reports"));
    fs::create_dir_all(&out_dir)?;

    let mut summary = String::from(
        "dataset,configs,complete,failed,best_mase,best_context,best_shape,best_strategy,best_lr,best_wd\n",
    );
    let mut scatter = String::from("dataset,frequency,horizon,best_context\n");
    for (slug, records) in &meta.datasets {
        meta.export_csv(slug, &out_dir)?;
        let complete = records.configs.iter().filter(|c| c.is_complete()).count();
        let failed = records.configs.len() - complete;
        if let Some((best, value)) = meta.best_final(slug, "mase") {
            summary.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                slug,
                records.configs.len(),
                complete,
                failed,
                value,
                best.config.context,
                best.config.shape.as_str(),
                best.config.strategy.as_str(),
                best.config.learning_rate,
                best.config.weight_decay,
            ));
            scatter.push_str(&format!(
                "{},{},{},{}\n",
                slug, best.metafeatures.frequency, best.metafeatures.horizon, best.config.context
            ));
        } else {
            summary.push_str(&format!(
                "{},{},{},{},,,,,,\n",
                slug,
                records.configs.len(),
                complete,
                failed
            ));
        }
    }
    fs::write(out_dir.join("summary.csv"), summary)?;
    fs::write(out_dir.join("context_scatter.csv"), scatter)?;

    if let Some(traces_dir) = traces {
        write_cd_report(&traces_dir, &out_dir)?;
    }
    println!("reports written to {}", out_dir.display());
    Ok(())
}

/// Fold hpo trace files into rank matrices and a critical-difference
/// report (needs at least 2 methods on at least 2 datasets).
fn write_cd_report(traces_dir: &Path, out_dir: &Path) -> Result<()> {
    let mut files: Vec<TraceFile> = Vec::new();
    for entry in fs::read_dir(traces_dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") {
            let text = fs::read_to_string(&path)?;
            if let Ok(t) = serde_json::from_str::<TraceFile>(&text) {
                files.push(t);
            }
        }
    }
    if files.is_empty() {
        bail!("no trace files found in {}", traces_dir.display());
    }
    // Average the incumbent's final objective over seeds per (task, method).
    let mut by_task_method: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for f in &files {
        by_task_method
            .entry((f.dataset.clone(), f.method.clone()))
            .or_default()
            .push(f.trace.final_test_objective);
    }
    let mut methods: Vec<String> = files.iter().map(|f| f.method.clone()).collect();
    methods.sort();
    methods.dedup();
    let mut tasks: Vec<String> = files.iter().map(|f| f.dataset.clone()).collect();
    tasks.sort();
    tasks.dedup();
    let mut matrix: Vec<Vec<f64>> = Vec::new();
    for task in &tasks {
        let mut row = Vec::with_capacity(methods.len());
        let mut full = true;
        for method in &methods {
            match by_task_method.get(&(task.clone(), method.clone())) {
                Some(vals) => row.push(vals.iter().sum::<f64>() / vals.len() as f64),
                None => full = false,
            }
        }
        if full {
            matrix.push(row);
        }
    }
    if methods.len() < 2 || matrix.len() < 2 {
        println!(
            "cd report skipped: need >= 2 methods on >= 2 datasets, have {} x {}",
            methods.len(),
            matrix.len()
        );
        return Ok(());
    }
    let report = hpo::rank_and_cd(&methods, &matrix, 0.05)?;
    fs::write(out_dir.join("cd_report.json"), serde_json::to_string_pretty(&report)?)?;
    let mut csv = String::from("method,mean_rank,bar_lo,bar_hi\n");
    for (i, method) in report.methods.iter().enumerate() {
        // The widest clique containing this method gives its bar endpoints.
        let mut lo = report.mean_ranks[i];
        let mut hi = report.mean_ranks[i];
        for group in &report.groups {
            if group.contains(&i) {
                for &j in group {
                    lo = lo.min(report.mean_ranks[j]);
                    hi = hi.max(report.mean_ranks[j]);
                }
            }
        }
        csv.push_str(&format!("{},{},{},{}\n", method, report.mean_ranks[i], lo, hi));
    }
    fs::write(out_dir.join("cd_report.csv"), csv)?;
    println!(
        "cd report: k={} tasks={} cd={:.4} mean_ranks={:?}",
        report.methods.len(),
        report.n_tasks,
        report.critical_difference,
        report.methods.iter().zip(&report.mean_ranks).collect::<Vec<_>>()
    );
    Ok(())
}
