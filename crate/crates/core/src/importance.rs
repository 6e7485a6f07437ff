//! Exact functional-ANOVA variance decomposition over a full factorial
//! grid of recorded objectives.
//!
//! Because the sweep records every cell of the Cartesian grid, the
//! decomposition needs no surrogate model: main effects are centered
//! marginal means, pairwise effects are doubly-centered marginals, and
//! the residual holds all higher-order interactions. Orthogonality makes
//! the variance components sum to the total exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metastore::{ConfigRecord, Metadataset};

#[derive(Debug, Error, PartialEq)]
pub enum ImportanceError {
    #[error("value count {values} does not match grid size {cells}")]
    SizeMismatch { values: usize, cells: usize },
    #[error("factor {0:?} has fewer than 2 levels")]
    TooFewLevels(String),
    #[error("interaction order must be 1 or 2, got {0}")]
    BadOrder(usize),
    #[error("grid is incomplete; {0} cells missing (first: {1})")]
    IncompleteGrid(usize, String),
    #[error("dataset {0:?} not present in the store")]
    UnknownDataset(String),
    #[error("unknown objective key {0:?}")]
    UnknownObjective(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub name: String,
    pub levels: Vec<String>,
}

/// Full factorial table; `values[c]` is the objective of the cell whose
/// mixed-radix index is `c`, with the last factor varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTable {
    pub factors: Vec<Factor>,
    pub values: Vec<f64>,
}

impl GridTable {
    pub fn new(factors: Vec<Factor>, values: Vec<f64>) -> Result<GridTable, ImportanceError> {
        for f in &factors {
            if f.levels.len() < 2 {
                return Err(ImportanceError::TooFewLevels(f.name.clone()));
            }
        }
        let cells: usize = factors.iter().map(|f| f.levels.len()).product();
        if values.len() != cells {
            return Err(ImportanceError::SizeMismatch { values: values.len(), cells });
        }
        Ok(GridTable { factors, values })
    }

    pub fn dims(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.levels.len()).collect()
    }

    /// Strides for mixed-radix cell indexing (last factor fastest).
    fn strides(&self) -> Vec<usize> {
        let dims = self.dims();
        let mut strides = vec![1usize; dims.len()];
        for i in (0..dims.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * dims[i + 1];
        }
        strides
    }

    fn level_of(&self, cell: usize, factor: usize, strides: &[usize]) -> usize {
        (cell / strides[factor]) % self.factors[factor].levels.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairImportance {
    pub factors: (usize, usize),
    pub importance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub factors: Vec<String>,
    /// Main-effect variance share per factor, in factor order.
    pub main: Vec<f64>,
    /// Pairwise interaction shares (order 2 only).
    pub pairwise: Vec<PairImportance>,
    /// Share of variance in interactions above the requested order.
    pub residual: f64,
    pub total_variance: f64,
    /// All cells equal: importances are defined as zero.
    pub degenerate: bool,
}

/// Exact variance decomposition up to the requested interaction order.
pub fn grid_fanova(table: &GridTable, order: usize) -> Result<ImportanceReport, ImportanceError> {
    if !(order == 1 || order == 2) {
        return Err(ImportanceError::BadOrder(order));
    }
    let names: Vec<String> = table.factors.iter().map(|f| f.name.clone()).collect();
    let k = table.factors.len();
    let dims = table.dims();
    let strides = table.strides();
    let values = &table.values;
    let n = values.len() as f64;

    if values.windows(2).all(|w| w[0] == w[1]) {
        return Ok(ImportanceReport {
            factors: names,
            main: vec![0.0; k],
            pairwise: Vec::new(),
            residual: 0.0,
            total_variance: 0.0,
            degenerate: true,
        });
    }

    let grand_mean = values.iter().sum::<f64>() / n;
    let total_variance = values.iter().map(|v| (v - grand_mean) * (v - grand_mean)).sum::<f64>() / n;

    // Centered marginal means per factor level.
    let mut main_effects: Vec<Vec<f64>> = Vec::with_capacity(k);
    for i in 0..k {
        let mut sums = vec![0.0; dims[i]];
        for (cell, v) in values.iter().enumerate() {
            sums[table.level_of(cell, i, &strides)] += v;
        }
        let cells_per_level = n / dims[i] as f64;
        main_effects.push(sums.into_iter().map(|s| s / cells_per_level - grand_mean).collect());
    }
    let main_variance: Vec<f64> = main_effects
        .iter()
        .map(|f| f.iter().map(|e| e * e).sum::<f64>() / f.len() as f64)
        .collect();

    // Doubly-centered pairwise marginals.
    let mut pair_effects: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    let mut pair_variance: Vec<PairImportance> = Vec::new();
    if order == 2 {
        for i in 0..k {
            for j in i + 1..k {
                let mut sums = vec![0.0; dims[i] * dims[j]];
                for (cell, v) in values.iter().enumerate() {
                    let a = table.level_of(cell, i, &strides);
                    let b = table.level_of(cell, j, &strides);
                    sums[a * dims[j] + b] += v;
                }
                let cells_per_pair = n / (dims[i] * dims[j]) as f64;
                let mut effect = vec![0.0; dims[i] * dims[j]];
                for a in 0..dims[i] {
                    for b in 0..dims[j] {
                        effect[a * dims[j] + b] = sums[a * dims[j] + b] / cells_per_pair
                            - grand_mean
                            - main_effects[i][a]
                            - main_effects[j][b];
                    }
                }
                let var = effect.iter().map(|e| e * e).sum::<f64>() / effect.len() as f64;
                pair_variance.push(PairImportance { factors: (i, j), importance: var });
                pair_effects.insert((i, j), effect);
            }
        }
    }

    // Residual = cell value minus every fitted component; its variance
    // completes the decomposition identity exactly.
    let mut residual_variance = 0.0;
    for (cell, v) in values.iter().enumerate() {
        let mut rem = v - grand_mean;
        for i in 0..k {
            rem -= main_effects[i][table.level_of(cell, i, &strides)];
        }
        for ((i, j), effect) in &pair_effects {
            let a = table.level_of(cell, *i, &strides);
            let b = table.level_of(cell, *j, &strides);
            rem -= effect[a * dims[*j] + b];
        }
        residual_variance += rem * rem;
    }
    residual_variance /= n;

    Ok(ImportanceReport {
        factors: names,
        main: main_variance.iter().map(|v| v / total_variance).collect(),
        pairwise: pair_variance
            .into_iter()
            .map(|p| PairImportance { factors: p.factors, importance: p.importance / total_variance })
            .collect(),
        residual: residual_variance / total_variance,
        total_variance,
        degenerate: false,
    })
}

/// Which recorded number fills the grid cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Objective {
    /// Validation NLL at the best epoch (the selection criterion).
    BestValidationNll,
    /// A validation metric read at the best epoch.
    ValidationAtBest(String),
    /// A final test metric of the selected model.
    FinalTest(String),
}

impl Objective {
    pub fn parse(s: &str) -> Result<Objective, ImportanceError> {
        if s == "nll" || s == "val.nll" {
            return Ok(Objective::BestValidationNll);
        }
        if let Some(key) = s.strip_prefix("val.") {
            return Ok(Objective::ValidationAtBest(key.to_string()));
        }
        if let Some(key) = s.strip_prefix("test.") {
            return Ok(Objective::FinalTest(key.to_string()));
        }
        Err(ImportanceError::UnknownObjective(s.to_string()))
    }
}

fn objective_of(
    meta: &Metadataset,
    dataset: &str,
    record: &ConfigRecord,
    objective: &Objective,
) -> Option<f64> {
    match objective {
        Objective::BestValidationNll => {
            let best = record.best_epoch?;
            let records = meta.dataset(dataset)?;
            records.epochs_for(record.id()).get(best).map(|e| e.val_nll)
        }
        Objective::ValidationAtBest(key) => {
            let best = record.best_epoch?;
            let records = meta.dataset(dataset)?;
            records.epochs_for(record.id()).get(best).and_then(|e| e.val.get(key))
        }
        Objective::FinalTest(key) => record.final_test.as_ref().and_then(|r| r.get(key)),
    }
}

/// Build the factorial table from a finished sweep: factors are the tuned
/// hyperparameters that actually vary in the store (optionally seed as an
/// extra factor), levels are the distinct values present, and each cell
/// averages its replicates.
pub fn prepare_grid(
    meta: &Metadataset,
    dataset: &str,
    objective: &Objective,
    seed_as_factor: bool,
) -> Result<GridTable, ImportanceError> {
    type LevelOf = Box<dyn Fn(&crate::trainer::TrainConfig) -> String>;
    let records = meta
        .dataset(dataset)
        .ok_or_else(|| ImportanceError::UnknownDataset(dataset.to_string()))?;
    if records.configs.is_empty() {
        return Err(ImportanceError::UnknownDataset(dataset.to_string()));
    }

    let mut candidates: Vec<(&str, LevelOf)> = vec![
        ("context", Box::new(|c| c.context.to_string())),
        ("strategy", Box::new(|c| c.strategy.as_str().to_string())),
        ("shape", Box::new(|c| c.shape.as_str().to_string())),
        ("dist_hidden", Box::new(|c| c.dist_hidden.to_string())),
        ("learning_rate", Box::new(|c| format!("{}", c.learning_rate))),
        ("weight_decay", Box::new(|c| format!("{}", c.weight_decay))),
    ];
    if seed_as_factor {
        candidates.push(("seed", Box::new(|c| c.seed.to_string())));
    }

    // Distinct observed levels per candidate; constant dimensions are not
    // factors (seeds pool into their cell as replicates).
    let mut factors: Vec<Factor> = Vec::new();
    let mut extractors: Vec<&LevelOf> = Vec::new();
    for (name, extract) in &candidates {
        let mut levels: Vec<String> = Vec::new();
        for c in &records.configs {
            let l = extract(&c.config);
            if !levels.contains(&l) {
                levels.push(l);
            }
        }
        // Numeric levels sort by value, everything else lexically.
        levels.sort_by(|a, b| match (a.parse::<f64>(), b.parse::<f64>()) {
            (Ok(x), Ok(y)) => x.partial_cmp(&y).unwrap(),
            _ => a.cmp(b),
        });
        if levels.len() >= 2 {
            factors.push(Factor { name: name.to_string(), levels });
            extractors.push(extract);
        }
    }
    if factors.is_empty() {
        return Err(ImportanceError::TooFewLevels("no varying hyperparameter".to_string()));
    }

    let dims: Vec<usize> = factors.iter().map(|f| f.levels.len()).collect();
    let cells: usize = dims.iter().product();
    let mut sums = vec![0.0; cells];
    let mut counts = vec![0usize; cells];
    for c in &records.configs {
        let mut idx = 0usize;
        for (f, extract) in extractors.iter().enumerate() {
            let level = extract(&c.config);
            let pos = factors[f].levels.iter().position(|l| *l == level).unwrap();
            idx = idx * dims[f] + pos;
        }
        if let Some(v) = objective_of(meta, dataset, c, objective) {
            if v.is_finite() {
                sums[idx] += v;
                counts[idx] += 1;
            }
        }
    }
    let missing: Vec<usize> = (0..cells).filter(|&i| counts[i] == 0).collect();
    if !missing.is_empty() {
        let first = cell_label(&factors, missing[0]);
        return Err(ImportanceError::IncompleteGrid(missing.len(), first));
    }
    let values: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    GridTable::new(factors, values)
}

fn cell_label(factors: &[Factor], mut cell: usize) -> String {
    let mut parts = vec![String::new(); factors.len()];
    for (i, f) in factors.iter().enumerate().rev() {
        let d = f.levels.len();
        parts[i] = format!("{}={}", f.name, f.levels[cell % d]);
        cell /= d;
    }
    parts.join("|")
}
