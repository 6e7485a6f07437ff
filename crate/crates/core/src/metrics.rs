//! Forecast accuracy metrics and window-level aggregation.
//!
//! Point metrics operate on a target/forecast pair, quantile metrics on a
//! matrix of forecast samples. Ratio metrics (ND, NRMSE, weighted quantile
//! loss) are aggregated across windows by pooling numerators and
//! denominators before dividing; MASE and MAPE are averaged per window.

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// The nine decile levels used for quantile loss and the CRPS proxy.
pub const QUANTILE_LEVELS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("all targets are zero; nd/nrmse/mape undefined")]
    AllTargetsZero,
    #[error("in-sample seasonal-naive errors are all zero")]
    ConstantInsample,
    #[error("in-sample series of length {len} too short for seasonality {m}")]
    InsampleTooShort { len: usize, m: usize },
}

/// How the MASE denominator is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaseMode {
    /// Mean absolute error divided by the mean in-sample seasonal-naive
    /// absolute error. Matches the Monash repository convention. Default.
    Monash,
    /// Per-step ratio against the seasonal-naive continuation, averaged
    /// over the horizon. Zero-denominator steps are skipped and counted.
    Paper,
}

/// Full per-window (or aggregated) evaluation report.
///
/// `quantile_loss` entries are sums over timesteps, so they pool across
/// windows by addition; `weighted_quantile_loss` divides by the summed
/// absolute target. `n_points` and `n_windows` carry the pooling weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mase: f64,
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
    pub nrmse: f64,
    pub nd: f64,
    pub mape: f64,
    /// Entries skipped by MAPE because the target was zero.
    pub mape_skipped: usize,
    pub quantile_loss: [f64; 9],
    pub weighted_quantile_loss: [f64; 9],
    pub crps_proxy: f64,
    pub nll: f64,
    pub n_points: usize,
    pub n_windows: usize,
}

impl MetricReport {
    /// Canonical flat key/value view (`mase`, `mse`, ..., `ql_0.1`,
    /// `wql_0.1`, ..., `crps`, `nll`).
    pub fn to_flat_map(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("mase".to_string(), self.mase),
            ("mse".to_string(), self.mse),
            ("mae".to_string(), self.mae),
            ("rmse".to_string(), self.rmse),
            ("nrmse".to_string(), self.nrmse),
            ("nd".to_string(), self.nd),
            ("mape".to_string(), self.mape),
            ("mape_skipped".to_string(), self.mape_skipped as f64),
        ];
        for (i, q) in QUANTILE_LEVELS.iter().enumerate() {
            out.push((format!("ql_{q}"), self.quantile_loss[i]));
        }
        for (i, q) in QUANTILE_LEVELS.iter().enumerate() {
            out.push((format!("wql_{q}"), self.weighted_quantile_loss[i]));
        }
        out.push(("crps".to_string(), self.crps_proxy));
        out.push(("nll".to_string(), self.nll));
        out.push(("n_points".to_string(), self.n_points as f64));
        out.push(("n_windows".to_string(), self.n_windows as f64));
        out
    }

    /// Look up a metric by its canonical flat key.
    pub fn get(&self, key: &str) -> Option<f64> {
        self.to_flat_map()
            .into_iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v)
    }

    /// Keys accepted by [`MetricReport::get`].
    pub fn flat_keys() -> Vec<String> {
        Self::zeroed().to_flat_map().into_iter().map(|(k, _)| k).collect()
    }

    fn zeroed() -> Self {
        MetricReport {
            mase: 0.0,
            mse: 0.0,
            mae: 0.0,
            rmse: 0.0,
            nrmse: 0.0,
            nd: 0.0,
            mape: 0.0,
            mape_skipped: 0,
            quantile_loss: [0.0; 9],
            weighted_quantile_loss: [0.0; 9],
            crps_proxy: 0.0,
            nll: 0.0,
            n_points: 0,
            n_windows: 0,
        }
    }

    fn set(&mut self, key: &str, v: f64) -> bool {
        if let Some(rest) = key.strip_prefix("ql_") {
            if let Some(i) = quantile_index(rest) {
                self.quantile_loss[i] = v;
                return true;
            }
            return false;
        }
        if let Some(rest) = key.strip_prefix("wql_") {
            if let Some(i) = quantile_index(rest) {
                self.weighted_quantile_loss[i] = v;
                return true;
            }
            return false;
        }
        match key {
            "mase" => self.mase = v,
            "mse" => self.mse = v,
            "mae" => self.mae = v,
            "rmse" => self.rmse = v,
            "nrmse" => self.nrmse = v,
            "nd" => self.nd = v,
            "mape" => self.mape = v,
            "mape_skipped" => self.mape_skipped = v as usize,
            "crps" => self.crps_proxy = v,
            "nll" => self.nll = v,
            "n_points" => self.n_points = v as usize,
            "n_windows" => self.n_windows = v as usize,
            _ => return false,
        }
        true
    }
}

fn quantile_index(s: &str) -> Option<usize> {
    let q: f64 = s.parse().ok()?;
    QUANTILE_LEVELS.iter().position(|x| (x - q).abs() < 1e-9)
}

impl Serialize for MetricReport {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let flat = self.to_flat_map();
        let mut map = serializer.serialize_map(Some(flat.len()))?;
        for (k, v) in flat {
            if k == "mape_skipped" || k == "n_points" || k == "n_windows" {
                map.serialize_entry(&k, &(v as u64))?;
            } else {
                map.serialize_entry(&k, &v)?;
            }
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for MetricReport {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = MetricReport;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a flat metric map")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Self::Value, A::Error> {
                let mut report = MetricReport::zeroed();
                while let Some((k, v)) = access.next_entry::<String, f64>()? {
                    if !report.set(&k, v) {
                        return Err(serde::de::Error::custom(format!("unknown metric key {k}")));
                    }
                }
                Ok(report)
            }
        }
        deserializer.deserialize_map(V)
    }
}

/// Seasonal-naive continuation of `insample` for `horizon` steps.
pub fn seasonal_naive_forecast(insample: &[f64], m: usize, horizon: usize) -> Vec<f64> {
    let n = insample.len();
    let m = m.max(1).min(n);
    (0..horizon).map(|j| insample[n - m + (j % m)]).collect()
}

/// Mean absolute scaled error.
///
/// Monash mode scales by the mean in-sample seasonal-naive absolute error;
/// paper mode averages per-step ratios against the seasonal-naive
/// continuation, skipping steps with a zero denominator.
pub fn mase(
    y: &[f64],
    y_hat: &[f64],
    insample: &[f64],
    m: usize,
    mode: MaseMode,
) -> Result<f64, MetricError> {
    if y.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    if y.len() != y_hat.len() {
        return Err(MetricError::LengthMismatch(y.len(), y_hat.len()));
    }
    let m = m.max(1);
    if insample.len() <= m {
        return Err(MetricError::InsampleTooShort { len: insample.len(), m });
    }
    match mode {
        MaseMode::Monash => {
            let num: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64;
            let den: f64 = (m..insample.len())
                .map(|t| (insample[t] - insample[t - m]).abs())
                .sum::<f64>()
                / (insample.len() - m) as f64;
            if den == 0.0 {
                return Err(MetricError::ConstantInsample);
            }
            Ok(num / den)
        }
        MaseMode::Paper => {
            let naive = seasonal_naive_forecast(insample, m, y.len());
            let mut sum = 0.0;
            let mut kept = 0usize;
            for j in 0..y.len() {
                let den = (y[j] - naive[j]).abs();
                if den == 0.0 {
                    continue;
                }
                sum += (y[j] - y_hat[j]).abs() / den;
                kept += 1;
            }
            if kept == 0 {
                // The naive forecast was exact everywhere; every ratio
                // denominator vanished.
                if y.iter().zip(y_hat).all(|(a, b)| a == b) {
                    return Ok(0.0);
                }
                return Err(MetricError::ConstantInsample);
            }
            Ok(sum / kept as f64)
        }
    }
}

/// Point metrics for one window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMetrics {
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
    pub nrmse: f64,
    pub nd: f64,
    pub mape: f64,
    pub mape_skipped: usize,
    pub sum_abs_y: f64,
    pub n: usize,
}

pub fn point_metrics(y: &[f64], y_hat: &[f64]) -> Result<PointMetrics, MetricError> {
    if y.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    if y.len() != y_hat.len() {
        return Err(MetricError::LengthMismatch(y.len(), y_hat.len()));
    }
    let n = y.len();
    let mut sum_abs = 0.0;
    let mut sum_sq = 0.0;
    let mut sum_abs_y = 0.0;
    let mut mape_sum = 0.0;
    let mut mape_n = 0usize;
    for (a, f) in y.iter().zip(y_hat) {
        let e = a - f;
        sum_abs += e.abs();
        sum_sq += e * e;
        sum_abs_y += a.abs();
        if *a != 0.0 {
            mape_sum += (e / a).abs();
            mape_n += 1;
        }
    }
    if sum_abs_y == 0.0 {
        return Err(MetricError::AllTargetsZero);
    }
    let mse = sum_sq / n as f64;
    let mae = sum_abs / n as f64;
    let rmse = mse.sqrt();
    Ok(PointMetrics {
        mse,
        mae,
        rmse,
        nrmse: rmse / (sum_abs_y / n as f64),
        nd: sum_abs / sum_abs_y,
        mape: mape_sum / mape_n as f64,
        mape_skipped: n - mape_n,
        sum_abs_y,
        n,
    })
}

/// Empirical quantile with linear interpolation (type 7) over a sorted slice.
pub fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty slice");
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < n {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

/// Per-timestep median of a sample matrix (`samples[i]` is draw `i`).
pub fn sample_median(samples: &[Vec<f64>]) -> Vec<f64> {
    let horizon = samples.first().map_or(0, |s| s.len());
    let mut out = Vec::with_capacity(horizon);
    let mut col = Vec::with_capacity(samples.len());
    for t in 0..horizon {
        col.clear();
        col.extend(samples.iter().map(|s| s[t]));
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out.push(empirical_quantile(&col, 0.5));
    }
    out
}

/// Quantile losses for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileMetrics {
    /// `QL_q = sum_t 2(q (y - q_hat)^+ + (1-q)(q_hat - y)^+)`.
    pub quantile_loss: [f64; 9],
    pub weighted_quantile_loss: [f64; 9],
    pub crps_proxy: f64,
    pub sum_abs_y: f64,
}

pub fn quantile_metrics(samples: &[Vec<f64>], y: &[f64]) -> Result<QuantileMetrics, MetricError> {
    if samples.is_empty() || y.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    for s in samples {
        if s.len() != y.len() {
            return Err(MetricError::LengthMismatch(s.len(), y.len()));
        }
    }
    let sum_abs_y: f64 = y.iter().map(|v| v.abs()).sum();
    if sum_abs_y == 0.0 {
        return Err(MetricError::AllTargetsZero);
    }
    let mut ql = [0.0; 9];
    let mut col = Vec::with_capacity(samples.len());
    for (t, &yt) in y.iter().enumerate() {
        col.clear();
        col.extend(samples.iter().map(|s| s[t]));
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (i, &q) in QUANTILE_LEVELS.iter().enumerate() {
            let q_hat = empirical_quantile(&col, q);
            ql[i] += 2.0 * (q * (yt - q_hat).max(0.0) + (1.0 - q) * (q_hat - yt).max(0.0));
        }
    }
    let mut wql = [0.0; 9];
    for i in 0..9 {
        wql[i] = ql[i] / sum_abs_y;
    }
    let crps_proxy = wql.iter().sum::<f64>() / 9.0;
    Ok(QuantileMetrics { quantile_loss: ql, weighted_quantile_loss: wql, crps_proxy, sum_abs_y })
}

/// Assemble a full report for one evaluation window.
#[allow(clippy::too_many_arguments)]
pub fn window_report(
    y: &[f64],
    point_forecast: &[f64],
    samples: &[Vec<f64>],
    insample: &[f64],
    seasonality: usize,
    mase_mode: MaseMode,
    nll: f64,
) -> Result<MetricReport, MetricError> {
    let pm = point_metrics(y, point_forecast)?;
    let qm = quantile_metrics(samples, y)?;
    let mase = mase(y, point_forecast, insample, seasonality, mase_mode)?;
    Ok(MetricReport {
        mase,
        mse: pm.mse,
        mae: pm.mae,
        rmse: pm.rmse,
        nrmse: pm.nrmse,
        nd: pm.nd,
        mape: pm.mape,
        mape_skipped: pm.mape_skipped,
        quantile_loss: qm.quantile_loss,
        weighted_quantile_loss: qm.weighted_quantile_loss,
        crps_proxy: qm.crps_proxy,
        nll,
        n_points: pm.n,
        n_windows: 1,
    })
}

/// Aggregate window reports into a dataset-level report.
///
/// `weights[i]` must be the summed absolute target of window `i` (the
/// denominator of its ratio metrics). MASE, MAPE and NLL are averaged per
/// window; MAE/MSE pool over points; ND, NRMSE and weighted quantile
/// losses are recomputed from pooled numerators and denominators.
pub fn aggregate_reports(reports: &[MetricReport], weights: &[f64]) -> Result<MetricReport, MetricError> {
    if reports.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    if reports.len() != weights.len() {
        return Err(MetricError::LengthMismatch(reports.len(), weights.len()));
    }
    let n_windows: usize = reports.iter().map(|r| r.n_windows).sum();
    let n_points: usize = reports.iter().map(|r| r.n_points).sum();
    let sum_w: f64 = weights.iter().sum();
    if sum_w == 0.0 {
        return Err(MetricError::AllTargetsZero);
    }
    let mut agg = MetricReport::zeroed();
    agg.n_windows = n_windows;
    agg.n_points = n_points;
    let nf = n_points as f64;
    for (r, &w) in reports.iter().zip(weights) {
        let wn = r.n_windows as f64;
        agg.mase += r.mase * wn;
        agg.mape += r.mape * wn;
        agg.nll += r.nll * wn;
        agg.mape_skipped += r.mape_skipped;
        agg.mae += r.mae * r.n_points as f64;
        agg.mse += r.mse * r.n_points as f64;
        // nd * w restores the window's absolute-error numerator.
        agg.nd += r.nd * w;
        for i in 0..9 {
            agg.quantile_loss[i] += r.quantile_loss[i];
        }
    }
    let wins = n_windows as f64;
    agg.mase /= wins;
    agg.mape /= wins;
    agg.nll /= wins;
    agg.mae /= nf;
    agg.mse /= nf;
    agg.rmse = agg.mse.sqrt();
    agg.nd /= sum_w;
    agg.nrmse = agg.rmse / (sum_w / nf);
    for i in 0..9 {
        agg.weighted_quantile_loss[i] = agg.quantile_loss[i] / sum_w;
    }
    agg.crps_proxy = agg.weighted_quantile_loss.iter().sum::<f64>() / 9.0;
    Ok(agg)
}
