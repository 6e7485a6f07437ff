//! JSONL metadataset store: one config record and one epoch record per
//! completed epoch for every run, plus a manifest declaring the expected
//! grid.
//!
//! Layout: `<root>/manifest.json`, `<root>/<dataset>/configs.jsonl`,
//! `<root>/<dataset>/epochs.jsonl`. A run's epoch lines are appended
//! before its config line, so a config record's presence implies its
//! epochs are all on disk; epoch lines without a config record are crash
//! leftovers, ignored by readers and compacted away when a writer next
//! opens the store. One writer at a time (lock file), any number of
//! readers. Floats are serialized with 17 significant digits.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hpo::{encode_config, TabularBenchmark};
use crate::metrics::MetricReport;
use crate::trainer::{EpochRecord, RunResult, RunStatus, TrainConfig};
use crate::tsf::TimeSeriesDataset;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("schema version {found} unsupported (expected {expected})")]
    SchemaMismatch { found: u32, expected: u32 },
    #[error("{file} line {line}: corrupt record: {message}")]
    CorruptLine { file: String, line: usize, message: String },
    #[error("config {config_id} already present")]
    DuplicateConfig { config_id: String },
    #[error("duplicate epoch {epoch} for config {config_id}")]
    DuplicateEpoch { config_id: String, epoch: usize },
    #[error("store is locked by {holder}")]
    StoreLocked { holder: String },
    #[error("unknown objective key {key:?}")]
    UnknownMetric { key: String },
    #[error("no records match the selection")]
    EmptySelection,
    #[error("dataset {0:?} not declared in the manifest")]
    UnknownDataset(String),
}

/// Directory-safe dataset key.
pub fn slugify(name: &str) -> String {
    let mut out: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    if out.is_empty() {
        out.push('_');
    }
    out
}

/// JSON formatter printing every f64 with 17 significant digits, enough
/// to reproduce the exact bit pattern on parse.
struct SigFigFormatter;

impl serde_json::ser::Formatter for SigFigFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

/// Serialize one record as a compact JSON line (no trailing newline).
pub fn to_json_line<T: Serialize>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SigFigFormatter);
    value.serialize(&mut ser).expect("record serializes");
    String::from_utf8(buf).expect("json is utf8")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetafeatures {
    pub dataset: String,
    pub frequency: String,
    pub seasonality: usize,
    pub horizon: usize,
    pub series_count: usize,
    pub min_length: usize,
    pub max_length: usize,
}

impl DatasetMetafeatures {
    pub fn from_dataset(ds: &TimeSeriesDataset, horizon: usize) -> DatasetMetafeatures {
        DatasetMetafeatures {
            dataset: ds.name.clone(),
            frequency: ds.frequency.as_str().to_string(),
            seasonality: ds.seasonality,
            horizon,
            series_count: ds.series.len(),
            min_length: ds.min_len(),
            max_length: ds.max_len(),
        }
    }
}

/// Coarse, per-configuration record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigRecord {
    pub config_id: String,
    pub config: TrainConfig,
    pub activation: String,
    pub param_count: usize,
    pub metafeatures: DatasetMetafeatures,
    pub status: String,
    pub fail_reason: Option<String>,
    pub best_epoch: Option<usize>,
    pub final_test: Option<MetricReport>,
    pub total_runtime_secs: f64,
    pub retrain_epochs: Option<usize>,
}

impl ConfigRecord {
    pub fn from_run(meta: &DatasetMetafeatures, result: &RunResult) -> ConfigRecord {
        let (status, fail_reason) = match &result.status {
            RunStatus::Complete => ("complete".to_string(), None),
            RunStatus::Failed { reason, .. } => ("failed".to_string(), Some(reason.clone())),
        };
        ConfigRecord {
            config_id: result.config.id_hex(),
            config: result.config.clone(),
            activation: result.config.shape.activation().to_string(),
            param_count: result.param_count,
            metafeatures: meta.clone(),
            status,
            fail_reason,
            best_epoch: result.best_epoch,
            final_test: result.final_test.clone(),
            total_runtime_secs: result.total_runtime_secs,
            retrain_epochs: result.audit.retrain_epochs,
        }
    }

    pub fn id(&self) -> u64 {
        u64::from_str_radix(&self.config_id, 16).expect("hex config id")
    }

    pub fn is_complete(&self) -> bool {
        self.status == "complete"
    }
}

/// Fine, per-epoch record. Gradient statistics are flattened under
/// `grad.<layer>.<stat>` keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLogRecord {
    pub config_id: String,
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub val: MetricReport,
    pub test: MetricReport,
    pub grads: BTreeMap<String, f64>,
    pub learning_rate: f64,
    pub runtime_secs: f64,
}

impl EpochLogRecord {
    pub fn from_epoch(config_id: &str, e: &EpochRecord) -> EpochLogRecord {
        let mut grads = BTreeMap::new();
        for s in &e.grad_stats {
            grads.insert(format!("grad.{}.max", s.layer), s.max);
            grads.insert(format!("grad.{}.mean", s.layer), s.mean);
            grads.insert(format!("grad.{}.median", s.layer), s.median);
            grads.insert(format!("grad.{}.std", s.layer), s.std);
            for (i, q) in crate::metrics::QUANTILE_LEVELS.iter().enumerate() {
                grads.insert(format!("grad.{}.q{}", s.layer, q), s.deciles[i]);
            }
        }
        EpochLogRecord {
            config_id: config_id.to_string(),
            epoch: e.epoch,
            train_nll: e.train_nll,
            val_nll: e.val_nll,
            val: e.val_report.clone(),
            test: e.test_report.clone(),
            grads,
            learning_rate: e.learning_rate,
            runtime_secs: e.runtime_secs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    /// Hex ids of every config the sweep is expected to produce.
    pub expected_configs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub datasets: BTreeMap<String, DatasetManifest>,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest { schema_version: SCHEMA_VERSION, datasets: BTreeMap::new() }
    }
}

struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn acquire_lock(root: &Path) -> Result<LockGuard, StoreError> {
    let path = root.join(".lock");
    for _ in 0..2 {
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = write!(f, "{}", std::process::id());
                return Ok(LockGuard { path });
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let holder = fs::read_to_string(&path).unwrap_or_default();
                let stale = holder
                    .trim()
                    .parse::<u32>()
                    .map(|pid| !Path::new(&format!("/proc/{pid}")).exists())
                    .unwrap_or(true);
                if stale {
                    let _ = fs::remove_file(&path);
                    continue;
                }
                return Err(StoreError::StoreLocked { holder: holder.trim().to_string() });
            }
            Err(e) => return Err(e.into()),
        }
    }
    Err(StoreError::StoreLocked { holder: "unknown".to_string() })
}

fn read_manifest(root: &Path) -> Result<Manifest, StoreError> {
    let path = root.join("manifest.json");
    if !path.exists() {
        return Ok(Manifest::default());
    }
    let text = fs::read_to_string(&path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| StoreError::CorruptLine {
        file: "manifest.json".to_string(),
        line: 1,
        message: e.to_string(),
    })?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(StoreError::SchemaMismatch {
            found: manifest.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    Ok(manifest)
}

fn write_manifest(root: &Path, manifest: &Manifest) -> Result<(), StoreError> {
    let tmp = root.join("manifest.json.tmp");
    fs::write(&tmp, to_json_line(manifest))?;
    fs::rename(&tmp, root.join("manifest.json"))?;
    Ok(())
}

/// Raw lines of a JSONL file; a trailing line that does not parse is
/// treated as a crash artifact and reported, any earlier bad line is an
/// error.
fn scan_jsonl(path: &Path) -> Result<(Vec<String>, bool), StoreError> {
    if !path.exists() {
        return Ok((Vec::new(), false));
    }
    let text = fs::read_to_string(path)?;
    let complete_tail = text.ends_with('\n');
    let mut lines: Vec<String> = text.lines().map(|l| l.to_string()).collect();
    let mut dropped_trailing = false;
    if !complete_tail && !lines.is_empty() {
        lines.pop();
        dropped_trailing = true;
    }
    Ok((lines, dropped_trailing))
}

fn parse_lines<T: for<'de> Deserialize<'de>>(
    file: &str,
    lines: &[String],
) -> Result<(Vec<T>, bool), StoreError> {
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str::<T>(line) {
            Ok(v) => out.push(v),
            Err(e) => {
                if i + 1 == lines.len() {
                    // Mid-write crash artifact on the final line.
                    return Ok((out, true));
                }
                return Err(StoreError::CorruptLine {
                    file: file.to_string(),
                    line: i + 1,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok((out, false))
}

/// What the reader had to skip to produce a consistent view.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub dropped_trailing_lines: usize,
    pub orphaned_epoch_lines: usize,
}

#[derive(Debug)]
pub struct DatasetRecords {
    pub configs: Vec<ConfigRecord>,
    pub epochs: HashMap<u64, Vec<EpochLogRecord>>,
    pub recovery: RecoveryReport,
    by_id: HashMap<u64, usize>,
}

impl DatasetRecords {
    pub fn config(&self, id: u64) -> Option<&ConfigRecord> {
        self.by_id.get(&id).map(|&i| &self.configs[i])
    }

    pub fn epochs_for(&self, id: u64) -> &[EpochLogRecord] {
        self.epochs.get(&id).map(|v| v.as_slice()).unwrap_or(&[])
    }
}

#[derive(Debug)]
pub struct Metadataset {
    pub manifest: Manifest,
    pub datasets: BTreeMap<String, DatasetRecords>,
}

fn load_dataset_dir(dir: &Path) -> Result<DatasetRecords, StoreError> {
    let mut recovery = RecoveryReport::default();
    let (config_lines, trailing_c) = scan_jsonl(&dir.join("configs.jsonl"))?;
    let (configs, partial_c) = parse_lines::<ConfigRecord>("configs.jsonl", &config_lines)?;
    recovery.dropped_trailing_lines += usize::from(trailing_c) + usize::from(partial_c);

    let mut by_id = HashMap::new();
    for (i, c) in configs.iter().enumerate() {
        if by_id.insert(c.id(), i).is_some() {
            return Err(StoreError::DuplicateConfig { config_id: c.config_id.clone() });
        }
    }

    let (epoch_lines, trailing_e) = scan_jsonl(&dir.join("epochs.jsonl"))?;
    let (epoch_records, partial_e) = parse_lines::<EpochLogRecord>("epochs.jsonl", &epoch_lines)?;
    recovery.dropped_trailing_lines += usize::from(trailing_e) + usize::from(partial_e);

    let mut epochs: HashMap<u64, Vec<EpochLogRecord>> = HashMap::new();
    for rec in epoch_records {
        let id = u64::from_str_radix(&rec.config_id, 16).map_err(|e| StoreError::CorruptLine {
            file: "epochs.jsonl".to_string(),
            line: 0,
            message: format!("bad config id {}: {e}", rec.config_id),
        })?;
        if by_id.contains_key(&id) {
            epochs.entry(id).or_default().push(rec);
        } else {
            recovery.orphaned_epoch_lines += 1;
        }
    }
    for (id, list) in &mut epochs {
        list.sort_by_key(|r| r.epoch);
        for (expect, rec) in list.iter().enumerate() {
            if rec.epoch != expect {
                return Err(StoreError::DuplicateEpoch {
                    config_id: format!("{id:016x}"),
                    epoch: rec.epoch,
                });
            }
        }
    }
    Ok(DatasetRecords { configs, epochs, recovery, by_id })
}

/// Load a store for reading. Crash leftovers (truncated final lines,
/// epoch lines without a config record) are skipped and counted; interior
/// corruption is an error.
pub fn load(root: &Path) -> Result<Metadataset, StoreError> {
    let manifest = read_manifest(root)?;
    let mut datasets = BTreeMap::new();
    if root.exists() {
        for entry in fs::read_dir(root)? {
            let entry = entry?;
            if !entry.file_type()?.is_dir() {
                continue;
            }
            let dir = entry.path();
            if dir.join("configs.jsonl").exists() || dir.join("epochs.jsonl").exists() {
                let slug = entry.file_name().to_string_lossy().to_string();
                datasets.insert(slug, load_dataset_dir(&dir)?);
            }
        }
    }
    Ok(Metadataset { manifest, datasets })
}

impl Metadataset {
    pub fn dataset(&self, name: &str) -> Option<&DatasetRecords> {
        self.datasets.get(&slugify(name))
    }

    /// Pure filter over config records.
    pub fn query<'a>(
        &'a self,
        dataset: &str,
        pred: impl Fn(&ConfigRecord) -> bool,
    ) -> Vec<&'a ConfigRecord> {
        self.dataset(dataset)
            .map(|d| d.configs.iter().filter(|c| pred(c)).collect())
            .unwrap_or_default()
    }

    /// Present/missing ids against the manifest's declared grid.
    pub fn completeness(&self, dataset: &str) -> Result<CompletenessReport, StoreError> {
        let slug = slugify(dataset);
        let declared = self
            .manifest
            .datasets
            .get(&slug)
            .ok_or_else(|| StoreError::UnknownDataset(dataset.to_string()))?;
        let expected: BTreeSet<String> = declared.expected_configs.iter().cloned().collect();
        let present: BTreeSet<String> = self
            .datasets
            .get(&slug)
            .map(|d| d.configs.iter().map(|c| c.config_id.clone()).collect())
            .unwrap_or_default();
        Ok(CompletenessReport {
            expected: expected.len(),
            present: present.len(),
            missing: expected.difference(&present).cloned().collect(),
            unexpected: present.difference(&expected).cloned().collect(),
        })
    }

    /// Best final test objective among complete runs.
    pub fn best_final(&self, dataset: &str, key: &str) -> Option<(&ConfigRecord, f64)> {
        self.dataset(dataset)?
            .configs
            .iter()
            .filter_map(|c| {
                c.final_test.as_ref().and_then(|r| r.get(key)).map(|v| (c, v))
            })
            .filter(|(_, v)| v.is_finite())
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
    }

    /// Benchmark view: per config the validation objective curve over
    /// epochs and the final test objective. Search objectives must be
    /// validation-side ("nll" or "val.<metric>") while `guard` is on;
    /// failed runs contribute censored curves and infinite finals.
    pub fn to_tabular_benchmark(
        &self,
        dataset: &str,
        objective: &str,
        final_key: &str,
        guard: bool,
    ) -> Result<TabularBenchmark, StoreError> {
        let records = self
            .dataset(dataset)
            .ok_or_else(|| StoreError::UnknownDataset(dataset.to_string()))?;
        if records.configs.is_empty() {
            return Err(StoreError::EmptySelection);
        }
        enum Objective<'k> {
            ValNll,
            Val(&'k str),
            Test(&'k str),
        }
        let objective = if objective == "nll" || objective == "val.nll" {
            Objective::ValNll
        } else if let Some(key) = objective.strip_prefix("val.") {
            if !MetricReport::flat_keys().iter().any(|k| k == key) {
                return Err(StoreError::UnknownMetric { key: objective.to_string() });
            }
            Objective::Val(key)
        } else if let Some(key) = objective.strip_prefix("test.") {
            if guard {
                // Test-side metrics are reserved for final scoring.
                return Err(StoreError::UnknownMetric { key: objective.to_string() });
            }
            if !MetricReport::flat_keys().iter().any(|k| k == key) {
                return Err(StoreError::UnknownMetric { key: objective.to_string() });
            }
            Objective::Test(key)
        } else {
            return Err(StoreError::UnknownMetric { key: objective.to_string() });
        };
        let final_metric = final_key.strip_prefix("test.").unwrap_or(final_key);
        if !MetricReport::flat_keys().iter().any(|k| k == final_metric) {
            return Err(StoreError::UnknownMetric { key: final_key.to_string() });
        }

        let mut order: Vec<usize> = (0..records.configs.len()).collect();
        order.sort_by_key(|&i| records.configs[i].id());
        let mut ids = Vec::with_capacity(order.len());
        let mut descriptors = Vec::with_capacity(order.len());
        let mut curves = Vec::with_capacity(order.len());
        let mut finals = Vec::with_capacity(order.len());
        let mut max_fidelity = 0usize;
        for &i in &order {
            let c = &records.configs[i];
            let id = c.id();
            let curve: Vec<f64> = records
                .epochs_for(id)
                .iter()
                .map(|e| match &objective {
                    Objective::ValNll => e.val_nll,
                    Objective::Val(key) => e.val.get(key).unwrap_or(f64::INFINITY),
                    Objective::Test(key) => e.test.get(key).unwrap_or(f64::INFINITY),
                })
                .collect();
            max_fidelity = max_fidelity.max(c.config.epochs);
            ids.push(id);
            descriptors.push(encode_config(&c.config));
            curves.push(curve);
            finals.push(
                c.final_test
                    .as_ref()
                    .and_then(|r| r.get(final_metric))
                    .unwrap_or(f64::INFINITY),
            );
        }
        if max_fidelity == 0 {
            return Err(StoreError::EmptySelection);
        }
        Ok(TabularBenchmark {
            name: dataset.to_string(),
            ids,
            descriptors,
            curves,
            finals,
            max_fidelity,
        })
    }

    /// Re-serialize every record into a fresh store (fixpoint check and
    /// compaction helper).
    pub fn write_to(&self, root: &Path) -> Result<(), StoreError> {
        let mut writer = StoreWriter::open(root)?;
        writer.manifest = self.manifest.clone();
        write_manifest(root, &writer.manifest)?;
        for (slug, records) in &self.datasets {
            for c in &records.configs {
                let epochs = records.epochs_for(c.id()).to_vec();
                writer.append_records(slug, c.clone(), &epochs)?;
            }
        }
        Ok(())
    }

    /// Flattened CSV export; returns the two file paths written.
    pub fn export_csv(&self, dataset: &str, out_dir: &Path) -> Result<(PathBuf, PathBuf), StoreError> {
        let records = self
            .dataset(dataset)
            .ok_or_else(|| StoreError::UnknownDataset(dataset.to_string()))?;
        fs::create_dir_all(out_dir)?;
        let slug = slugify(dataset);

        let metric_keys = MetricReport::flat_keys();
        let configs_path = out_dir.join(format!("{slug}_configs.csv"));
        {
            let mut f = fs::File::create(&configs_path)?;
            let mut header = vec![
                "config_id", "dataset", "context", "strategy", "shape", "dist_hidden",
                "learning_rate", "weight_decay", "seed", "epochs", "batches_per_epoch",
                "batch_size", "forecast_samples", "horizon", "activation", "param_count",
                "frequency", "seasonality", "series_count", "min_length", "max_length",
                "status", "best_epoch", "retrain_epochs", "total_runtime_secs",
            ]
            .into_iter()
            .map(str::to_string)
            .collect::<Vec<_>>();
            header.extend(metric_keys.iter().map(|k| format!("final.{k}")));
            writeln!(f, "{}", header.join(","))?;
            for c in &records.configs {
                let mut row = vec![
                    c.config_id.clone(),
                    csv_escape(&c.config.dataset),
                    c.config.context.to_string(),
                    c.config.strategy.as_str().to_string(),
                    c.config.shape.as_str().to_string(),
                    c.config.dist_hidden.to_string(),
                    fmt_f64(c.config.learning_rate),
                    fmt_f64(c.config.weight_decay),
                    c.config.seed.to_string(),
                    c.config.epochs.to_string(),
                    c.config.batches_per_epoch.to_string(),
                    c.config.batch_size.to_string(),
                    c.config.forecast_samples.to_string(),
                    c.metafeatures.horizon.to_string(),
                    c.activation.clone(),
                    c.param_count.to_string(),
                    c.metafeatures.frequency.clone(),
                    c.metafeatures.seasonality.to_string(),
                    c.metafeatures.series_count.to_string(),
                    c.metafeatures.min_length.to_string(),
                    c.metafeatures.max_length.to_string(),
                    c.status.clone(),
                    c.best_epoch.map_or(String::new(), |e| e.to_string()),
                    c.retrain_epochs.map_or(String::new(), |e| e.to_string()),
                    fmt_f64(c.total_runtime_secs),
                ];
                match &c.final_test {
                    Some(r) => row.extend(r.to_flat_map().into_iter().map(|(_, v)| fmt_f64(v))),
                    None => row.extend(metric_keys.iter().map(|_| String::new())),
                }
                writeln!(f, "{}", row.join(","))?;
            }
        }

        // Union of gradient keys across shapes for a stable epoch header.
        let mut grad_keys: BTreeSet<String> = BTreeSet::new();
        for list in records.epochs.values() {
            for e in list {
                grad_keys.extend(e.grads.keys().cloned());
            }
        }
        let epochs_path = out_dir.join(format!("{slug}_epochs.csv"));
        {
            let mut f = fs::File::create(&epochs_path)?;
            let mut header = vec!["config_id".to_string(), "epoch".to_string(), "train_nll".to_string(), "val_nll".to_string()];
            header.extend(metric_keys.iter().map(|k| format!("val.{k}")));
            header.extend(metric_keys.iter().map(|k| format!("test.{k}")));
            header.extend(grad_keys.iter().cloned());
            header.push("learning_rate".to_string());
            header.push("runtime_secs".to_string());
            writeln!(f, "{}", header.join(","))?;
            let mut ids: Vec<&u64> = records.epochs.keys().collect();
            ids.sort();
            for id in ids {
                for e in records.epochs_for(*id) {
                    let mut row = vec![
                        e.config_id.clone(),
                        e.epoch.to_string(),
                        fmt_f64(e.train_nll),
                        fmt_f64(e.val_nll),
                    ];
                    row.extend(e.val.to_flat_map().into_iter().map(|(_, v)| fmt_f64(v)));
                    row.extend(e.test.to_flat_map().into_iter().map(|(_, v)| fmt_f64(v)));
                    for k in &grad_keys {
                        row.push(e.grads.get(k).map_or(String::new(), |v| fmt_f64(*v)));
                    }
                    row.push(fmt_f64(e.learning_rate));
                    row.push(fmt_f64(e.runtime_secs));
                    writeln!(f, "{}", row.join(","))?;
                }
            }
        }
        Ok((configs_path, epochs_path))
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_escape(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletenessReport {
    pub expected: usize,
    pub present: usize,
    pub missing: Vec<String>,
    pub unexpected: Vec<String>,
}

impl CompletenessReport {
    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }
}

/// Exclusive append handle. Opening compacts crash leftovers so the files
/// are consistent before new runs land.
pub struct StoreWriter {
    root: PathBuf,
    manifest: Manifest,
    present: HashSet<(String, u64)>,
    _lock: LockGuard,
}

impl StoreWriter {
    pub fn open(root: &Path) -> Result<StoreWriter, StoreError> {
        fs::create_dir_all(root)?;
        let lock = acquire_lock(root)?;
        let manifest = read_manifest(root)?;
        let mut present = HashSet::new();
        for entry in fs::read_dir(root)? {
            let entry = entry?;
            if !entry.file_type()?.is_dir() {
                continue;
            }
            let slug = entry.file_name().to_string_lossy().to_string();
            let ids = compact_dataset_dir(&entry.path())?;
            for id in ids {
                present.insert((slug.clone(), id));
            }
        }
        Ok(StoreWriter { root: root.to_path_buf(), manifest, present, _lock: lock })
    }

    /// Declare the configs a sweep is expected to produce.
    pub fn declare_expected(&mut self, dataset: &str, grid: &[TrainConfig]) -> Result<(), StoreError> {
        let slug = slugify(dataset);
        let mut expected: Vec<String> = grid.iter().map(|c| c.id_hex()).collect();
        expected.sort();
        expected.dedup();
        self.manifest
            .datasets
            .insert(slug, DatasetManifest { name: dataset.to_string(), expected_configs: expected });
        write_manifest(&self.root, &self.manifest)
    }

    /// Config ids already present for a dataset (resume support).
    pub fn existing_ids(&self, dataset: &str) -> HashSet<u64> {
        let slug = slugify(dataset);
        self.present
            .iter()
            .filter(|(s, _)| *s == slug)
            .map(|(_, id)| *id)
            .collect()
    }

    /// Append one run: its epoch records first, the config record last.
    /// The config line is the commit point.
    pub fn append_run(
        &mut self,
        meta: &DatasetMetafeatures,
        result: &RunResult,
    ) -> Result<u64, StoreError> {
        let config = ConfigRecord::from_run(meta, result);
        let epochs: Vec<EpochLogRecord> = result
            .epochs
            .iter()
            .map(|e| EpochLogRecord::from_epoch(&config.config_id, e))
            .collect();
        let slug = slugify(&result.config.dataset);
        self.append_records(&slug, config, &epochs)
    }

    fn append_records(
        &mut self,
        slug: &str,
        config: ConfigRecord,
        epochs: &[EpochLogRecord],
    ) -> Result<u64, StoreError> {
        let id = config.id();
        if self.present.contains(&(slug.to_string(), id)) {
            return Err(StoreError::DuplicateConfig { config_id: config.config_id });
        }
        let dir = self.root.join(slug);
        fs::create_dir_all(&dir)?;
        {
            let mut f = fs::OpenOptions::new().create(true).append(true).open(dir.join("epochs.jsonl"))?;
            let mut buf = String::new();
            for e in epochs {
                buf.push_str(&to_json_line(e));
                buf.push('\n');
            }
            f.write_all(buf.as_bytes())?;
            f.flush()?;
        }
        {
            let mut f =
                fs::OpenOptions::new().create(true).append(true).open(dir.join("configs.jsonl"))?;
            f.write_all(format!("{}\n", to_json_line(&config)).as_bytes())?;
            f.flush()?;
        }
        self.present.insert((slug.to_string(), id));
        Ok(id)
    }
}

/// Drop truncated trailing lines and orphaned epoch lines, rewriting the
/// files in place (tmp + rename). Returns the config ids present.
fn compact_dataset_dir(dir: &Path) -> Result<Vec<u64>, StoreError> {
    let configs_path = dir.join("configs.jsonl");
    let epochs_path = dir.join("epochs.jsonl");
    let (config_lines, dropped_c) = scan_jsonl(&configs_path)?;
    let (configs, partial_c) = parse_lines::<ConfigRecord>("configs.jsonl", &config_lines)?;
    let kept_config_lines = &config_lines[..configs.len()];
    if dropped_c || partial_c {
        rewrite(&configs_path, kept_config_lines)?;
    }
    let ids: Vec<u64> = configs.iter().map(|c| c.id()).collect();
    let id_set: HashSet<u64> = ids.iter().copied().collect();

    let (epoch_lines, dropped_e) = scan_jsonl(&epochs_path)?;
    let (epoch_records, partial_e) = parse_lines::<EpochLogRecord>("epochs.jsonl", &epoch_lines)?;
    let mut kept: Vec<&String> = Vec::with_capacity(epoch_lines.len());
    let mut orphaned = false;
    for (line, rec) in epoch_lines.iter().zip(&epoch_records) {
        let id = u64::from_str_radix(&rec.config_id, 16).unwrap_or(u64::MAX);
        if id_set.contains(&id) {
            kept.push(line);
        } else {
            orphaned = true;
        }
    }
    if dropped_e || partial_e || orphaned {
        let lines: Vec<String> = kept.into_iter().cloned().collect();
        rewrite(&epochs_path, &lines)?;
    }
    Ok(ids)
}

fn rewrite(path: &Path, lines: &[String]) -> Result<(), StoreError> {
    let tmp = path.with_extension("jsonl.tmp");
    let mut buf = String::new();
    for l in lines {
        buf.push_str(l);
        buf.push('\n');
    }
    fs::write(&tmp, buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MaseMode;
    use crate::trainer::{LayerGradStats, TrainingAudit, ValidationStrategy};
    use crate::model::Shape;

    fn fake_report(seedish: f64) -> MetricReport {
        let y = [2.0 + seedish, 4.0];
        let f = [1.0, 5.0];
        let samples: Vec<Vec<f64>> = (0..5).map(|_| f.to_vec()).collect();
        crate::metrics::window_report(&y, &f, &samples, &[1.0, 2.0, 3.0], 1, MaseMode::Monash, 0.5)
            .unwrap()
    }

    fn fake_run(dataset: &str, seed: u64, epochs: usize, fail_at: Option<usize>) -> RunResult {
        let config = TrainConfig::new(dataset, 7, ValidationStrategy::Oos, Shape::Base, 1, 0.01, 0.0, seed);
        let records: Vec<EpochRecord> = (0..epochs)
            .map(|e| EpochRecord {
                epoch: e,
                train_nll: 1.0 / (e + 1) as f64,
                val_nll: 2.0 / (e + 1) as f64,
                val_report: fake_report(e as f64 * 0.1),
                test_report: fake_report(e as f64 * 0.2),
                grad_stats: vec![LayerGradStats {
                    layer: "backbone0".to_string(),
                    max: 1.0,
                    mean: 0.5,
                    median: 0.4,
                    std: 0.1,
                    deciles: [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
                }],
                learning_rate: 0.01,
                runtime_secs: 0.25,
            })
            .collect();
        let status = match fail_at {
            Some(e) => RunStatus::Failed { epoch: e, reason: "synthetic failure".to_string() },
            None => RunStatus::Complete,
        };
        let complete = fail_at.is_none();
        RunResult {
            horizon: 4,
            best_epoch: if records.is_empty() { None } else { Some(records.len() - 1) },
            final_test: complete.then(|| fake_report(9.0)),
            status,
            total_runtime_secs: epochs as f64 * 0.25,
            param_count: 42,
            audit: TrainingAudit::default(),
            epochs: records,
            config,
        }
    }

    fn meta(dataset: &str) -> DatasetMetafeatures {
        DatasetMetafeatures {
            dataset: dataset.to_string(),
            frequency: "monthly".to_string(),
            seasonality: 12,
            horizon: 4,
            series_count: 3,
            min_length: 30,
            max_length: 30,
        }
    }

    #[test]
    fn append_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let run = fake_run("toy", 100, 50, None);
        {
            let mut w = StoreWriter::open(dir.path()).unwrap();
            w.append_run(&meta("toy"), &run).unwrap();
        }
        let store = load(dir.path()).unwrap();
        let records = store.dataset("toy").unwrap();
        assert_eq!(records.configs.len(), 1);
        let id = run.config.config_id();
        assert_eq!(records.epochs_for(id).len(), 50);
        assert_eq!(records.configs[0].status, "complete");
        assert_eq!(records.epochs_for(id)[49].val_nll, 2.0 / 50.0);
        assert_eq!(records.recovery, RecoveryReport::default());
        // Every float survives the 17-digit encoding exactly.
        let back = &records.epochs_for(id)[13];
        let orig = EpochLogRecord::from_epoch(&run.config.id_hex(), &run.epochs[13]);
        assert_eq!(*back, orig);
    }

    #[test]
    fn failed_run_keeps_partial_curve() {
        let dir = tempfile::tempdir().unwrap();
        let run = fake_run("toy", 100, 7, Some(7));
        let mut w = StoreWriter::open(dir.path()).unwrap();
        w.append_run(&meta("toy"), &run).unwrap();
        drop(w);
        let store = load(dir.path()).unwrap();
        let records = store.dataset("toy").unwrap();
        assert_eq!(records.configs[0].status, "failed");
        assert_eq!(records.epochs_for(run.config.config_id()).len(), 7);
    }

    #[test]
    fn duplicate_config_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let run = fake_run("toy", 100, 3, None);
        let mut w = StoreWriter::open(dir.path()).unwrap();
        w.append_run(&meta("toy"), &run).unwrap();
        let err = w.append_run(&meta("toy"), &run).unwrap_err();
        assert!(matches!(err, StoreError::DuplicateConfig { .. }));
    }

    #[test]
    fn query_filters_on_config_fields() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = StoreWriter::open(dir.path()).unwrap();
        let base = fake_run("toy", 100, 2, None);
        let mut square = fake_run("toy", 101, 2, None);
        square.config.shape = Shape::Square;
        w.append_run(&meta("toy"), &base).unwrap();
        w.append_run(&meta("toy"), &square).unwrap();
        drop(w);
        let store = load(dir.path()).unwrap();
        let hits = store.query("toy", |c| c.config.shape == Shape::Base);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].config.seed, 100);
    }

    #[test]
    fn second_writer_is_locked_out() {
        let dir = tempfile::tempdir().unwrap();
        let _w = StoreWriter::open(dir.path()).unwrap();
        assert!(matches!(StoreWriter::open(dir.path()), Err(StoreError::StoreLocked { .. })));
    }

    #[test]
    fn corrupt_interior_line_is_reported_with_number() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut w = StoreWriter::open(dir.path()).unwrap();
            for seed in [100, 101, 102] {
                w.append_run(&meta("toy"), &fake_run("toy", seed, 2, None)).unwrap();
            }
        }
        let path = dir.path().join("toy/configs.jsonl");
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[1] = "{not json";
        fs::write(&path, format!("{}\n", lines.join("\n"))).unwrap();
        match load(dir.path()) {
            Err(StoreError::CorruptLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected CorruptLine, got {other:?}"),
        }
    }

    #[test]
    fn crash_recovery_drops_orphans_and_truncated_tail() {
        let dir = tempfile::tempdir().unwrap();
        let good = fake_run("toy", 100, 5, None);
        {
            let mut w = StoreWriter::open(dir.path()).unwrap();
            w.append_run(&meta("toy"), &good).unwrap();
        }
        // Simulate a writer killed mid-run: epoch lines for a second config
        // land, the config line never does, and the final line is cut off.
        let crashed = fake_run("toy", 101, 5, None);
        let epochs_path = dir.path().join("toy/epochs.jsonl");
        {
            let mut f = fs::OpenOptions::new().append(true).open(&epochs_path).unwrap();
            let id = crashed.config.id_hex();
            for e in crashed.epochs.iter().take(3) {
                writeln!(f, "{}", to_json_line(&EpochLogRecord::from_epoch(&id, e))).unwrap();
            }
            write!(f, "{{\"config_id\":\"{id}\",\"epo").unwrap();
        }
        // Readers see only the committed run.
        let store = load(dir.path()).unwrap();
        let records = store.dataset("toy").unwrap();
        assert_eq!(records.configs.len(), 1);
        assert_eq!(records.recovery.orphaned_epoch_lines, 3);
        assert_eq!(records.recovery.dropped_trailing_lines, 1);
        // Reopening a writer compacts, then the crashed run re-appends
        // cleanly, exactly once.
        {
            let mut w = StoreWriter::open(dir.path()).unwrap();
            assert!(!w.existing_ids("toy").contains(&crashed.config.config_id()));
            w.append_run(&meta("toy"), &crashed).unwrap();
        }
        let store = load(dir.path()).unwrap();
        let records = store.dataset("toy").unwrap();
        assert_eq!(records.configs.len(), 2);
        assert_eq!(records.epochs_for(crashed.config.config_id()).len(), 5);
        assert_eq!(records.recovery, RecoveryReport::default());
    }

    #[test]
    fn rewrite_fixpoint() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut w = StoreWriter::open(dir.path()).unwrap();
            w.declare_expected("toy", &[fake_run("toy", 100, 2, None).config]).unwrap();
            w.append_run(&meta("toy"), &fake_run("toy", 100, 2, None)).unwrap();
            w.append_run(&meta("toy"), &fake_run("toy", 101, 2, Some(2))).unwrap();
        }
        let store = load(dir.path()).unwrap();
        let copy_dir = tempfile::tempdir().unwrap();
        store.write_to(copy_dir.path()).unwrap();
        let copy = load(copy_dir.path()).unwrap();
        assert_eq!(store.manifest, copy.manifest);
        let a = store.dataset("toy").unwrap();
        let b = copy.dataset("toy").unwrap();
        assert_eq!(a.configs, b.configs);
        for c in &a.configs {
            assert_eq!(a.epochs_for(c.id()), b.epochs_for(c.id()));
        }
    }

    #[test]
    fn completeness_tracks_missing_configs() {
        let dir = tempfile::tempdir().unwrap();
        let run_a = fake_run("toy", 100, 2, None);
        let run_b = fake_run("toy", 101, 2, None);
        {
            let mut w = StoreWriter::open(dir.path()).unwrap();
            w.declare_expected("toy", &[run_a.config.clone(), run_b.config.clone()]).unwrap();
            w.append_run(&meta("toy"), &run_a).unwrap();
        }
        let store = load(dir.path()).unwrap();
        let report = store.completeness("toy").unwrap();
        assert_eq!(report.expected, 2);
        assert_eq!(report.present, 1);
        assert_eq!(report.missing, vec![run_b.config.id_hex()]);
        assert!(!report.is_complete());
    }

    #[test]
    fn benchmark_view_indexing_guard_and_censoring() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut w = StoreWriter::open(dir.path()).unwrap();
            w.append_run(&meta("toy"), &fake_run("toy", 100, 50, None)).unwrap();
            w.append_run(&meta("toy"), &fake_run("toy", 101, 7, Some(7))).unwrap();
        }
        let store = load(dir.path()).unwrap();
        let bench = store.to_tabular_benchmark("toy", "nll", "test.mase", true).unwrap();
        assert_eq!(bench.n_configs(), 2);
        assert_eq!(bench.max_fidelity, 50);
        let complete = fake_run("toy", 100, 50, None).config.config_id();
        let failed = fake_run("toy", 101, 7, Some(7)).config.config_id();
        let ci = bench.ids.binary_search(&complete).unwrap();
        let fi = bench.ids.binary_search(&failed).unwrap();
        // Fidelity 50 reads the last epoch record of a complete run.
        assert_eq!(bench.value_at(ci, 50), Some(2.0 / 50.0));
        // A censored run past its last epoch yields no value.
        assert_eq!(bench.value_at(fi, 8), None);
        assert_eq!(bench.value_at(fi, 7), Some(2.0 / 7.0));
        assert!(bench.finals[fi].is_infinite());
        // Test-side search objectives are refused while the guard is on.
        assert!(matches!(
            store.to_tabular_benchmark("toy", "test.mase", "test.mase", true),
            Err(StoreError::UnknownMetric { .. })
        ));
        assert!(store.to_tabular_benchmark("toy", "test.mase", "test.mase", false).is_ok());
        assert!(matches!(
            store.to_tabular_benchmark("toy", "val.bogus", "test.mase", true),
            Err(StoreError::UnknownMetric { .. })
        ));
    }

    #[test]
    fn csv_export_writes_flattened_files() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut w = StoreWriter::open(dir.path()).unwrap();
            w.append_run(&meta("toy"), &fake_run("toy", 100, 3, None)).unwrap();
        }
        let store = load(dir.path()).unwrap();
        let out = tempfile::tempdir().unwrap();
        let (configs_csv, epochs_csv) = store.export_csv("toy", out.path()).unwrap();
        let ctext = fs::read_to_string(configs_csv).unwrap();
        assert!(ctext.lines().next().unwrap().contains("final.crps"));
        assert_eq!(ctext.lines().count(), 2);
        let etext = fs::read_to_string(epochs_csv).unwrap();
        assert!(etext.lines().next().unwrap().contains("grad.backbone0.q0.5"));
        assert_eq!(etext.lines().count(), 4);
    }
}
