//! Synthetic datasets and planted tabular benchmarks.
//!
//! These power the scaled-down experiments: learnable toy series for the
//! trainer, a hospital-shaped fixture for the `.tsf` layer, and smooth
//! planted objectives with monotone learning curves for the HPO
//! comparisons.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::hpo::{encode_config, TabularBenchmark};
use crate::trainer::{mix_seed, TrainConfig};
use crate::tsf::{Frequency, Series, TimeSeriesDataset};

/// Wrap raw value rows into a dataset with the given horizon/seasonality.
pub fn dataset_from_values(
    name: &str,
    values: Vec<Vec<f64>>,
    horizon: usize,
    seasonality: usize,
) -> TimeSeriesDataset {
    let equal_length = values.windows(2).all(|w| w[0].len() == w[1].len());
    TimeSeriesDataset {
        name: name.to_string(),
        frequency: Frequency::Other("synthetic".to_string()),
        horizon,
        seasonality,
        equal_length,
        contains_missing: false,
        series: values
            .into_iter()
            .enumerate()
            .map(|(i, v)| Series { id: format!("T{}", i + 1), start: String::new(), values: v })
            .collect(),
    }
}

/// One noiseless linear trend `x_t = slope * t`, exactly representable by
/// an affine map of any context window.
pub fn linear_trend_dataset(name: &str, len: usize, horizon: usize, slope: f64) -> TimeSeriesDataset {
    let values: Vec<f64> = (1..=len).map(|t| slope * t as f64).collect();
    dataset_from_values(name, vec![values], horizon, 1)
}

/// Seasonal sines with additive Gaussian noise; horizon and seasonality
/// both equal `period`. Each series gets its own level and phase so the
/// windows are not identical.
pub fn seasonal_dataset(
    name: &str,
    n_series: usize,
    len: usize,
    period: usize,
    noise_sigma: f64,
    seed: u64,
) -> TimeSeriesDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..n_series)
        .map(|s| {
            let level = 10.0 + s as f64;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (0..len)
                .map(|t| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    level
                        + (std::f64::consts::TAU * t as f64 / period as f64 + phase).sin()
                        + noise_sigma * noise
                })
                .collect()
        })
        .collect();
    dataset_from_values(name, values, period, period)
}

/// Stationary AR(1) series `x_t = phi x_{t-1} + eps`, plus a level shift.
pub fn ar1_series(len: usize, phi: f64, sigma: f64, level: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = 0.0;
    (0..len)
        .map(|_| {
            let eps: f64 = StandardNormal.sample(&mut rng);
            x = phi * x + sigma * eps;
            level + x
        })
        .collect()
}

/// A dataset with the hospital fixture's shape: 767 monthly series of
/// length 84, positive counts with yearly seasonality.
pub fn hospital_like_dataset(seed: u64) -> TimeSeriesDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let series = (0..767)
        .map(|s| {
            let level = 20.0 + (s % 60) as f64;
            let amp = 2.0 + (s % 7) as f64;
            let values = (0..84)
                .map(|t| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    (level + amp * (std::f64::consts::TAU * t as f64 / 12.0).sin() + noise).max(0.5)
                })
                .collect();
            Series {
                id: format!("T{}", s + 1),
                start: "2000-01-01 00-00-00".to_string(),
                values,
            }
        })
        .collect();
    TimeSeriesDataset {
        name: "hospital_like".to_string(),
        frequency: Frequency::Monthly,
        horizon: 12,
        seasonality: 12,
        equal_length: true,
        contains_missing: false,
        series,
    }
}

/// Benchmark where config `k` has constant objective `(k+1)/n` at every
/// fidelity. Handy for order-statistics oracles.
pub fn uniform_benchmark(n: usize, max_fidelity: usize) -> TabularBenchmark {
    TabularBenchmark {
        name: "uniform".to_string(),
        ids: (0..n as u64).collect(),
        descriptors: (0..n).map(|k| vec![k as f64]).collect(),
        curves: (0..n).map(|k| vec![(k + 1) as f64 / n as f64; max_fidelity]).collect(),
        finals: (0..n).map(|k| (k + 1) as f64 / n as f64).collect(),
        max_fidelity,
    }
}

/// Numeric summary of a config used by the planted objective.
fn planted_features(cfg: &TrainConfig) -> [f64; 6] {
    let shape_idx = crate::model::Shape::ALL.iter().position(|s| *s == cfg.shape).unwrap();
    let strat_idx = match cfg.strategy {
        crate::trainer::ValidationStrategy::Oos => 0.0,
        crate::trainer::ValidationStrategy::ReOos => 1.0,
        crate::trainer::ValidationStrategy::InSample => 2.0,
    };
    [
        (cfg.learning_rate.log10() + 4.0) / 2.0,
        (cfg.context as f64 / 2.0).ln() / 150f64.ln(),
        (cfg.dist_hidden as f64).ln() / 10f64.ln(),
        cfg.weight_decay / 0.5,
        shape_idx as f64 / 5.0,
        strat_idx,
    ]
}

fn unit_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// A full-grid tabular benchmark with a smooth planted objective.
///
/// The objective is a task-specific weighted quadratic bowl over the
/// config's numeric summary plus small replication noise; validation
/// curves decay geometrically toward it with a shared multiplier, so the
/// ordering at any fidelity matches the ordering at full fidelity.
pub fn planted_benchmark(name: &str, task_seed: u64, max_fidelity: usize) -> TabularBenchmark {
    let grid = TrainConfig::full_grid(name);
    let mut task_rng = ChaCha8Rng::seed_from_u64(task_seed);
    let optimum: [f64; 6] = std::array::from_fn(|_| task_rng.random_range(0.0..1.0));
    let weights: [f64; 6] = std::array::from_fn(|_| task_rng.random_range(0.4..1.6));
    let weight_sum: f64 = weights.iter().sum();

    let mut entries: Vec<(u64, Vec<f64>, f64, f64)> = grid
        .iter()
        .map(|cfg| {
            let id = cfg.config_id();
            let u = planted_features(cfg);
            let bowl: f64 = (0..6).map(|j| weights[j] * (u[j] - optimum[j]).powi(2)).sum();
            let base = 0.15 + 0.8 * bowl / weight_sum;
            let mut noise_rng = ChaCha8Rng::seed_from_u64(mix_seed(task_seed, id));
            let val = (base + 0.005 * unit_normal(&mut noise_rng)).max(0.01);
            let test = (base + 0.01 * unit_normal(&mut noise_rng)).max(0.01);
            (id, encode_config(cfg), val, test)
        })
        .collect();
    entries.sort_by_key(|e| e.0);

    let ids = entries.iter().map(|e| e.0).collect();
    let descriptors = entries.iter().map(|e| e.1.clone()).collect();
    let curves = entries
        .iter()
        .map(|e| {
            (0..max_fidelity)
                .map(|epoch| e.2 * (1.0 + 0.93f64.powi(epoch as i32 + 1)))
                .collect()
        })
        .collect();
    let finals = entries.iter().map(|e| e.3).collect();
    TabularBenchmark {
        name: format!("planted-{name}-{task_seed}"),
        ids,
        descriptors,
        curves,
        finals,
        max_fidelity,
    }
}
