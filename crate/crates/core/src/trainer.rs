//! End-to-end training of one hyperparameter configuration, plus grid
//! sweeps.
//!
//! A run trains for a fixed number of epochs (each exactly
//! `batches_per_epoch` Adam steps of `batch_size` windows), evaluates the
//! validation and test windows after every epoch, and selects the epoch
//! with the lowest validation NLL. The three validation strategies differ
//! in where training targets may come from and whether a second training
//! phase runs on train+validation. All randomness derives from the config
//! seed, so a run reproduces bit for bit (wall-clock runtimes aside).

use std::collections::HashSet;
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, MaseMode, MetricReport};
use crate::model::{
    self, adam_step, backward, build, forward, sample_forecast, student_t_nll, AdamState,
    ArchitectureSpec, GradientTensor, MlpParameters, Shape,
};
use crate::tsf::{
    enumerate_positions, make_eval_windows, sample_from_positions, sample_training_batch,
    split_dataset, DataSplits, EvalStage, Region, TimeSeriesDataset, TsfError, Window,
};

pub const CONTEXT_GRID: [usize; 5] = [2, 7, 24, 100, 300];
pub const DIST_HIDDEN_GRID: [usize; 3] = [1, 2, 10];
pub const LEARNING_RATE_GRID: [f64; 3] = [0.01, 0.001, 0.0001];
pub const WEIGHT_DECAY_GRID: [f64; 3] = [0.0, 0.1, 0.5];
pub const SEED_GRID: [u64; 3] = [100, 101, 102];
pub const STRATEGY_GRID: [ValidationStrategy; 2] =
    [ValidationStrategy::Oos, ValidationStrategy::ReOos];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tsf(#[from] TsfError),
    #[error(transparent)]
    Metric(#[from] metrics::MetricError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error("dataset contains missing values; complete data required")]
    MissingValues,
    #[error("no validation windows available")]
    NoValidationWindows,
}

/// Where validation data comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ValidationStrategy {
    /// Time-wise validation split; no retraining.
    Oos,
    /// Time-wise validation split; retrain on train+validation for
    /// `best_epoch + 1` epochs before test scoring.
    ReOos,
    /// Validation is a seeded 10% hold-out of in-sample window positions.
    InSample,
}

impl ValidationStrategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            ValidationStrategy::Oos => "OOS",
            ValidationStrategy::ReOos => "ReOOS",
            ValidationStrategy::InSample => "IS",
        }
    }

    pub fn parse(s: &str) -> Option<ValidationStrategy> {
        match s.to_ascii_lowercase().as_str() {
            "oos" => Some(ValidationStrategy::Oos),
            "reoos" | "re-oos" => Some(ValidationStrategy::ReOos),
            "is" | "insample" | "in-sample" => Some(ValidationStrategy::InSample),
            _ => None,
        }
    }
}

/// One cell of the hyperparameter grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dataset: String,
    pub context: usize,
    pub strategy: ValidationStrategy,
    pub shape: Shape,
    pub dist_hidden: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_epochs")]
    pub batches_per_epoch: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Forecast paths drawn per evaluation window.
    #[serde(default = "default_forecast_samples")]
    pub forecast_samples: usize,
    /// Use this horizon instead of the dataset default.
    #[serde(default)]
    pub horizon_override: Option<usize>,
    /// Initialization seed for the retraining phase; defaults to `seed`.
    #[serde(default)]
    pub retrain_seed: Option<u64>,
}

fn default_epochs() -> usize {
    50
}

fn default_batch_size() -> usize {
    64
}

fn default_forecast_samples() -> usize {
    100
}

impl TrainConfig {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dataset: &str,
        context: usize,
        strategy: ValidationStrategy,
        shape: Shape,
        dist_hidden: usize,
        learning_rate: f64,
        weight_decay: f64,
        seed: u64,
    ) -> TrainConfig {
        TrainConfig {
            dataset: dataset.to_string(),
            context,
            strategy,
            shape,
            dist_hidden,
            learning_rate,
            weight_decay,
            seed,
            epochs: 50,
            batches_per_epoch: 50,
            batch_size: 64,
            forecast_samples: 100,
            horizon_override: None,
            retrain_seed: None,
        }
    }

    /// Canonical text form; the stable config id is a hash of this.
    pub fn canonical_string(&self) -> String {
        format!(
            "dataset={}|context={}|strategy={}|shape={}|d={}|lr={}|wd={}|seed={}|epochs={}|bpe={}|bs={}|n={}|horizon={}|retrain_seed={}",
            self.dataset,
            self.context,
            self.strategy.as_str(),
            self.shape.as_str(),
            self.dist_hidden,
            self.learning_rate,
            self.weight_decay,
            self.seed,
            self.epochs,
            self.batches_per_epoch,
            self.batch_size,
            self.forecast_samples,
            self.horizon_override.map_or("default".to_string(), |h| h.to_string()),
            self.retrain_seed.map_or("same".to_string(), |s| s.to_string()),
        )
    }

    /// Stable 64-bit id (FNV-1a over the canonical string).
    pub fn config_id(&self) -> u64 {
        fnv1a64(self.canonical_string().as_bytes())
    }

    pub fn id_hex(&self) -> String {
        format!("{:016x}", self.config_id())
    }

    /// Whether every tunable lies on the published grid.
    pub fn is_on_grid(&self) -> bool {
        CONTEXT_GRID.contains(&self.context)
            && DIST_HIDDEN_GRID.contains(&self.dist_hidden)
            && LEARNING_RATE_GRID.contains(&self.learning_rate)
            && WEIGHT_DECAY_GRID.contains(&self.weight_decay)
            && SEED_GRID.contains(&self.seed)
            && STRATEGY_GRID.contains(&self.strategy)
    }

    /// The full published grid for one dataset: 5 contexts x 2 strategies
    /// x 6 shapes x 3 distribution widths x 3 learning rates x 3 weight
    /// decays x 3 seeds = 4860 configs.
    pub fn full_grid(dataset: &str) -> Vec<TrainConfig> {
        let mut out = Vec::with_capacity(4860);
        for &context in &CONTEXT_GRID {
            for &strategy in &STRATEGY_GRID {
                for shape in Shape::ALL {
                    for &dist_hidden in &DIST_HIDDEN_GRID {
                        for &learning_rate in &LEARNING_RATE_GRID {
                            for &weight_decay in &WEIGHT_DECAY_GRID {
                                for &seed in &SEED_GRID {
                                    out.push(TrainConfig::new(
                                        dataset,
                                        context,
                                        strategy,
                                        shape,
                                        dist_hidden,
                                        learning_rate,
                                        weight_decay,
                                        seed,
                                    ));
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Derive an independent RNG stream from the run seed (splitmix64 mix).
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const STREAM_BATCH: u64 = 1;
const STREAM_HOLDOUT: u64 = 2;
const STREAM_RETRAIN_BATCH: u64 = 3;
const STREAM_VAL_EVAL: u64 = 4;
const STREAM_TEST_EVAL: u64 = 5;
const STREAM_FINAL_EVAL: u64 = 6;

/// Absolute-gradient statistics for one layer, pooled over an epoch's steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGradStats {
    pub layer: String,
    pub max: f64,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    /// Deciles 0.1 through 0.9 of the absolute entries.
    pub deciles: [f64; 9],
}

fn layer_stats(layer: String, values: &mut [f64]) -> LayerGradStats {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mut deciles = [0.0; 9];
    for (i, q) in metrics::QUANTILE_LEVELS.iter().enumerate() {
        deciles[i] = metrics::empirical_quantile(values, *q);
    }
    LayerGradStats {
        layer,
        max: *values.last().unwrap(),
        mean,
        median: metrics::empirical_quantile(values, 0.5),
        std: var.sqrt(),
        deciles,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub val_report: MetricReport,
    pub test_report: MetricReport,
    pub grad_stats: Vec<LayerGradStats>,
    pub learning_rate: f64,
    pub runtime_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RunStatus {
    Complete,
    Failed { epoch: usize, reason: String },
}

impl RunStatus {
    pub fn is_complete(&self) -> bool {
        matches!(self, RunStatus::Complete)
    }
}

/// Counters proving the training protocol touched only the regions it was
/// allowed to. Test-region touches must be zero for every strategy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingAudit {
    /// Phase-1 training targets intersecting the validation region.
    pub phase1_val_target_touches: usize,
    /// Phase-2 (retraining) targets intersecting the validation region.
    pub phase2_val_target_touches: usize,
    /// Training targets intersecting the test region, any phase.
    pub test_target_touches: usize,
    /// In-sample protocol: training draws that hit the validation hold-out.
    pub holdout_touches: usize,
    /// Number of epochs the retraining phase ran.
    pub retrain_epochs: Option<usize>,
    /// Gradient steps taken across all phases.
    pub train_steps: usize,
    /// Windows consumed across all phases.
    pub train_windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: TrainConfig,
    /// Horizon actually used, so results are self-describing.
    pub horizon: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    /// Test report of the selected (or retrained) model; absent for
    /// failed runs.
    pub final_test: Option<MetricReport>,
    pub status: RunStatus,
    pub total_runtime_secs: f64,
    pub param_count: usize,
    pub audit: TrainingAudit,
}

impl RunResult {
    /// Equality of everything except wall-clock runtimes.
    pub fn same_outcome(&self, other: &RunResult) -> bool {
        self.config == other.config
            && self.horizon == other.horizon
            && self.best_epoch == other.best_epoch
            && self.final_test == other.final_test
            && self.status == other.status
            && self.param_count == other.param_count
            && self.audit == other.audit
            && self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.train_nll == b.train_nll
                    && a.val_nll == b.val_nll
                    && a.val_report == b.val_report
                    && a.test_report == b.test_report
                    && a.grad_stats == b.grad_stats
                    && a.learning_rate == b.learning_rate
            })
    }
}

/// Score a checkpoint on evaluation windows. The point forecast is the
/// per-timestep median of `samples` drawn paths; the MASE in-sample is
/// everything before each window's target, with seasonality falling back
/// to 1 when the history is shorter than one season.
pub fn evaluate_checkpoint(
    params: &MlpParameters,
    ds: &TimeSeriesDataset,
    windows: &[Window],
    samples: usize,
    seed: u64,
    mase_mode: MaseMode,
) -> Result<MetricReport, TrainError> {
    assert!(!windows.is_empty(), "evaluate_checkpoint needs windows");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(windows.len());
    let mut weights = Vec::with_capacity(windows.len());
    for w in windows {
        let (dist, _) = forward(params, &w.x)?;
        let nll = student_t_nll(&dist, &w.y);
        let draws = sample_forecast(&dist, samples, &mut rng);
        let point = metrics::sample_median(&draws);
        let insample = &ds.series[w.series].values[..w.target_start()];
        let m = if insample.len() > ds.seasonality { ds.seasonality } else { 1 };
        let report = metrics::window_report(&w.y, &point, &draws, insample, m, mase_mode, nll)?;
        weights.push(w.y.iter().map(|v| v.abs()).sum::<f64>());
        reports.push(report);
    }
    Ok(metrics::aggregate_reports(&reports, &weights)?)
}

fn validation_nll(params: &MlpParameters, windows: &[Window]) -> Result<f64, TrainError> {
    let mut acc = 0.0;
    for w in windows {
        let (dist, _) = forward(params, &w.x)?;
        acc += student_t_nll(&dist, &w.y);
    }
    Ok(acc / windows.len() as f64)
}

struct GradStatCollector {
    names: Vec<String>,
    values: Vec<Vec<f64>>,
}

impl GradStatCollector {
    fn new(params: &MlpParameters) -> GradStatCollector {
        let names: Vec<String> = params.layer_views().into_iter().map(|(n, _)| n).collect();
        let values = names.iter().map(|_| Vec::new()).collect();
        GradStatCollector { names, values }
    }

    fn absorb(&mut self, grads: &GradientTensor) {
        for (i, (_, views)) in grads.blocks.layer_views().into_iter().enumerate() {
            for view in views {
                self.values[i].extend(view.iter().map(|v| v.abs()));
            }
        }
    }

    fn finish(&mut self) -> Vec<LayerGradStats> {
        self.names
            .iter()
            .zip(&mut self.values)
            .map(|(n, v)| {
                let stats = layer_stats(n.clone(), v);
                v.clear();
                stats
            })
            .collect()
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Phase {
    Initial,
    Retrain,
}

fn audit_batch(
    audit: &mut TrainingAudit,
    splits: &DataSplits,
    batch: &[Window],
    phase: Phase,
    holdout: Option<&HashSet<(usize, usize)>>,
) {
    audit.train_steps += 1;
    audit.train_windows += batch.len();
    for w in batch {
        let s = &splits.per_series[w.series];
        let start = w.target_start();
        if start < s.val_end && w.end > s.train_end {
            match phase {
                Phase::Initial => audit.phase1_val_target_touches += 1,
                Phase::Retrain => audit.phase2_val_target_touches += 1,
            }
        }
        if w.end > s.val_end {
            audit.test_target_touches += 1;
        }
        if let Some(holdout) = holdout {
            if holdout.contains(&(w.series, start)) {
                audit.holdout_touches += 1;
            }
        }
    }
}

/// Model, optimizer and sampling state for one training phase.
struct EpochRunner<'a> {
    ds: &'a TimeSeriesDataset,
    splits: &'a DataSplits,
    cfg: &'a TrainConfig,
    region: Region,
    is_positions: Option<&'a [(usize, usize)]>,
    holdout: Option<&'a HashSet<(usize, usize)>>,
    phase: Phase,
    params: MlpParameters,
    state: AdamState,
    rng: ChaCha8Rng,
    collector: GradStatCollector,
}

struct EpochOutcome {
    train_nll: f64,
    grad_stats: Vec<LayerGradStats>,
    diverged: bool,
}

impl<'a> EpochRunner<'a> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        ds: &'a TimeSeriesDataset,
        splits: &'a DataSplits,
        cfg: &'a TrainConfig,
        arch: ArchitectureSpec,
        region: Region,
        is_positions: Option<&'a [(usize, usize)]>,
        holdout: Option<&'a HashSet<(usize, usize)>>,
        phase: Phase,
        init_seed: u64,
        batch_seed: u64,
    ) -> EpochRunner<'a> {
        let params = build(arch, init_seed);
        EpochRunner {
            ds,
            splits,
            cfg,
            region,
            is_positions,
            holdout,
            phase,
            collector: GradStatCollector::new(&params),
            state: AdamState::new(arch),
            rng: ChaCha8Rng::seed_from_u64(batch_seed),
            params,
        }
    }

    /// Exactly `batches_per_epoch` Adam steps of `batch_size` windows.
    fn run_epoch(&mut self, audit: &mut TrainingAudit) -> Result<EpochOutcome, TrainError> {
        let cfg = self.cfg;
        let arch = self.params.arch;
        let mut loss_acc = 0.0;
        for _ in 0..cfg.batches_per_epoch {
            let batch = match self.is_positions {
                Some(positions) => sample_from_positions(
                    self.ds,
                    positions,
                    cfg.context,
                    self.splits.horizon,
                    cfg.batch_size,
                    &mut self.rng,
                )?,
                None => sample_training_batch(
                    self.ds,
                    self.splits,
                    self.region,
                    cfg.context,
                    cfg.batch_size,
                    &mut self.rng,
                )?,
            };
            audit_batch(audit, self.splits, &batch, self.phase, self.holdout);
            let mut grads = GradientTensor { blocks: MlpParameters::zeros(arch) };
            let mut batch_loss = 0.0;
            for w in &batch {
                let (dist, cache) = forward(&self.params, &w.x)?;
                batch_loss += student_t_nll(&dist, &w.y);
                let g = backward(&self.params, &cache, &w.y);
                model::accumulate(&mut grads, &g);
            }
            batch_loss /= cfg.batch_size as f64;
            model::scale_gradient(&mut grads, 1.0 / cfg.batch_size as f64);
            if !batch_loss.is_finite() || !model::gradient_is_finite(&grads) {
                return Ok(EpochOutcome {
                    train_nll: batch_loss,
                    grad_stats: Vec::new(),
                    diverged: true,
                });
            }
            adam_step(&mut self.params, &grads, &mut self.state, cfg.learning_rate, cfg.weight_decay);
            self.collector.absorb(&grads);
            loss_acc += batch_loss;
        }
        Ok(EpochOutcome {
            train_nll: loss_acc / cfg.batches_per_epoch as f64,
            grad_stats: self.collector.finish(),
            diverged: false,
        })
    }
}

/// Execute one configuration end-to-end.
pub fn run_config(ds: &TimeSeriesDataset, cfg: &TrainConfig) -> Result<RunResult, TrainError> {
    assert!(
        cfg.epochs >= 1 && cfg.batches_per_epoch >= 1 && cfg.batch_size >= 1 && cfg.forecast_samples >= 1,
        "degenerate training protocol"
    );
    let run_started = Instant::now();
    if ds.contains_missing {
        return Err(TrainError::MissingValues);
    }
    let horizon = cfg.horizon_override.unwrap_or(ds.horizon);
    let splits = split_dataset(ds, horizon)?;
    let arch = ArchitectureSpec {
        shape: cfg.shape,
        context: cfg.context,
        horizon,
        dist_hidden: cfg.dist_hidden,
    };

    // Validation windows and the training-position domain per strategy.
    let mut is_positions: Option<Vec<(usize, usize)>> = None;
    let mut holdout: Option<HashSet<(usize, usize)>> = None;
    let val_windows: Vec<Window> = match cfg.strategy {
        ValidationStrategy::Oos | ValidationStrategy::ReOos => {
            make_eval_windows(ds, &splits, cfg.context, EvalStage::Validation)
        }
        ValidationStrategy::InSample => {
            let mut positions = enumerate_positions(&splits, Region::InSample);
            if positions.is_empty() {
                return Err(TrainError::Tsf(TsfError::EmptyRegion));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, STREAM_HOLDOUT));
            positions.shuffle(&mut rng);
            let held = (positions.len() as f64 * 0.1).ceil().max(1.0) as usize;
            // Held-out windows are evaluated with scaled errors, which
            // need at least two history points; keep target_start >= 2
            // positions for the hold-out and train on everything else.
            let (scorable, early): (Vec<(usize, usize)>, Vec<(usize, usize)>) =
                positions.into_iter().partition(|&(_, t)| t >= 2);
            if scorable.is_empty() {
                return Err(TrainError::NoValidationWindows);
            }
            let held = held.min(scorable.len());
            let held_positions: Vec<(usize, usize)> = scorable[..held].to_vec();
            let mut rest: Vec<(usize, usize)> = scorable[held..].to_vec();
            rest.extend(early);
            if rest.is_empty() {
                return Err(TrainError::Tsf(TsfError::EmptyRegion));
            }
            let windows = held_positions
                .iter()
                .map(|&p| crate::tsf::window_for_position(ds, p, cfg.context, horizon))
                .collect();
            holdout = Some(held_positions.into_iter().collect());
            is_positions = Some(rest);
            windows
        }
    };
    if val_windows.is_empty() {
        return Err(TrainError::NoValidationWindows);
    }
    let test_windows = make_eval_windows(ds, &splits, cfg.context, EvalStage::Test);

    let mut audit = TrainingAudit::default();
    let mut runner = EpochRunner::new(
        ds,
        &splits,
        cfg,
        arch,
        Region::Train,
        is_positions.as_deref(),
        holdout.as_ref(),
        Phase::Initial,
        cfg.seed,
        mix_seed(cfg.seed, STREAM_BATCH),
    );

    let mut records: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, MlpParameters)> = None;
    let mut failure: Option<(usize, String)> = None;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let outcome = runner.run_epoch(&mut audit)?;
        if outcome.diverged {
            failure = Some((epoch, "non-finite training loss or gradient".to_string()));
            break;
        }
        let val_nll = validation_nll(&runner.params, &val_windows)?;
        if !val_nll.is_finite() {
            failure = Some((epoch, "non-finite validation loss".to_string()));
            break;
        }
        let mut val_report = evaluate_checkpoint(
            &runner.params,
            ds,
            &val_windows,
            cfg.forecast_samples,
            mix_seed(cfg.seed, mix_seed(STREAM_VAL_EVAL, epoch as u64)),
            MaseMode::Monash,
        )?;
        val_report.nll = val_nll;
        let test_report = evaluate_checkpoint(
            &runner.params,
            ds,
            &test_windows,
            cfg.forecast_samples,
            mix_seed(cfg.seed, mix_seed(STREAM_TEST_EVAL, epoch as u64)),
            MaseMode::Monash,
        )?;
        if best.as_ref().is_none_or(|(_, b, _)| val_nll < *b) {
            best = Some((epoch, val_nll, runner.params.clone()));
        }
        records.push(EpochRecord {
            epoch,
            train_nll: outcome.train_nll,
            val_nll,
            val_report,
            test_report,
            grad_stats: outcome.grad_stats,
            learning_rate: cfg.learning_rate,
            runtime_secs: started.elapsed().as_secs_f64(),
        });
    }

    let best_epoch = best.as_ref().map(|(e, _, _)| *e);
    let mut final_test = None;
    let mut status = match &failure {
        Some((epoch, reason)) => RunStatus::Failed { epoch: *epoch, reason: reason.clone() },
        None => RunStatus::Complete,
    };

    if failure.is_none() {
        let (best_epoch, _, best_params) = best.expect("complete run has a best epoch");
        match cfg.strategy {
            ValidationStrategy::Oos | ValidationStrategy::InSample => {
                final_test = Some(evaluate_checkpoint(
                    &best_params,
                    ds,
                    &test_windows,
                    cfg.forecast_samples,
                    mix_seed(cfg.seed, STREAM_FINAL_EVAL),
                    MaseMode::Monash,
                )?);
            }
            ValidationStrategy::ReOos => {
                // Fresh initialization, then train on train+validation for
                // exactly best_epoch + 1 epochs with the same
                // hyperparameters.
                let retrain_epochs = best_epoch + 1;
                let init_seed = cfg.retrain_seed.unwrap_or(cfg.seed);
                let mut retrainer = EpochRunner::new(
                    ds,
                    &splits,
                    cfg,
                    arch,
                    Region::TrainPlusVal,
                    None,
                    None,
                    Phase::Retrain,
                    init_seed,
                    mix_seed(init_seed, STREAM_RETRAIN_BATCH),
                );
                let mut retrain_failed = None;
                for epoch in 0..retrain_epochs {
                    let outcome = retrainer.run_epoch(&mut audit)?;
                    if outcome.diverged {
                        retrain_failed = Some(epoch);
                        break;
                    }
                }
                audit.retrain_epochs = Some(retrain_epochs);
                match retrain_failed {
                    Some(epoch) => {
                        status = RunStatus::Failed {
                            epoch,
                            reason: "non-finite loss during retraining".to_string(),
                        };
                    }
                    None => {
                        final_test = Some(evaluate_checkpoint(
                            &retrainer.params,
                            ds,
                            &test_windows,
                            cfg.forecast_samples,
                            mix_seed(cfg.seed, STREAM_FINAL_EVAL),
                            MaseMode::Monash,
                        )?);
                    }
                }
            }
        }
    }

    Ok(RunResult {
        config: cfg.clone(),
        horizon,
        epochs: records,
        best_epoch,
        final_test,
        status,
        total_runtime_secs: run_started.elapsed().as_secs_f64(),
        param_count: arch.param_count(),
        audit,
    })
}

/// Run every config in `grid` that `skip` does not exclude, on a worker
/// pool of the given size. Each finished result goes through `sink`
/// (serialized by the caller, e.g. a store appender) and into the returned
/// list. Structural failures become failed-run results; the sweep
/// continues.
pub fn sweep_grid<S>(
    ds: &TimeSeriesDataset,
    grid: &[TrainConfig],
    parallelism: usize,
    skip: impl Fn(&TrainConfig) -> bool + Sync,
    sink: S,
) -> Vec<RunResult>
where
    S: Fn(&RunResult) + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .expect("worker pool");
    let results = Mutex::new(Vec::new());
    pool.install(|| {
        rayon::scope(|scope| {
            for cfg in grid {
                if skip(cfg) {
                    continue;
                }
                let results = &results;
                let sink = &sink;
                scope.spawn(move |_| {
                    let result = match run_config(ds, cfg) {
                        Ok(r) => r,
                        Err(e) => failed_placeholder(ds, cfg, e.to_string()),
                    };
                    sink(&result);
                    results.lock().unwrap().push(result);
                });
            }
        });
    });
    results.into_inner().unwrap()
}

fn failed_placeholder(ds: &TimeSeriesDataset, cfg: &TrainConfig, reason: String) -> RunResult {
    let horizon = cfg.horizon_override.unwrap_or(ds.horizon);
    let arch = ArchitectureSpec {
        shape: cfg.shape,
        context: cfg.context,
        horizon,
        dist_hidden: cfg.dist_hidden,
    };
    RunResult {
        config: cfg.clone(),
        horizon,
        epochs: Vec::new(),
        best_epoch: None,
        final_test: None,
        status: RunStatus::Failed { epoch: 0, reason },
        total_runtime_secs: 0.0,
        param_count: arch.param_count(),
        audit: TrainingAudit::default(),
    }
}
