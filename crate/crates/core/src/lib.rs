//! Workbench for probabilistic MLP time series forecasting experiments.
//!
//! The crate covers the full loop of a forecasting benchmark study:
//!
//! - [`tsf`]: Monash-style `.tsf` dataset parsing/serialization, time-wise
//!   splits, and window sampling.
//! - [`model`]: six MLP shapes with last-value normalization and a
//!   per-timestep Student-T head; exact analytic backprop and Adam.
//! - [`metrics`]: point and quantile forecast metrics with pooled
//!   aggregation semantics.
//! - [`trainer`]: runs one hyperparameter configuration end-to-end under a
//!   validation strategy and sweeps whole grids.
//! - [`metastore`]: JSONL persistence of per-config and per-epoch records,
//!   exposed as a tabular HPO benchmark.
//! - [`hpo`]: Random, Successive Halving, HyperBand and RF-surrogate
//!   Bayesian optimization against a tabular benchmark, with
//!   Friedman/Nemenyi rank reports.
//! - [`importance`]: exact functional-ANOVA variance decomposition over a
//!   full Cartesian grid of results.
//! - [`synthetic`]: generators for synthetic datasets and planted tabular
//!   benchmarks used by the scaled-down experiments.

pub mod hpo;
pub mod importance;
pub mod metastore;
pub mod metrics;
pub mod model;
pub mod synthetic;
pub mod trainer;
pub mod tsf;

pub use metrics::MetricReport;
pub use model::{ArchitectureSpec, MlpParameters, Shape};
pub use trainer::{RunResult, TrainConfig, ValidationStrategy};

