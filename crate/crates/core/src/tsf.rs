//! Monash-style `.tsf` dataset files, time-wise splits, and window sampling.
//!
//! The supported grammar is the subset used by the forecasting repository:
//! `@relation`, `@attribute <name> <type>`, `@frequency <word>`,
//! `@horizon <int>`, `@missing <bool>`, `@equallength <bool>`, `@data`,
//! comment lines starting with `#`, and one series per line of
//! colon-separated attribute values ending in a comma-separated value list.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TsfError {
    #[error("line {line}: malformed header: {message}")]
    MalformedHeader { line: usize, message: String },
    #[error("no @data section found")]
    MissingDataSection,
    #[error("line {line}: expected {expected} colon-separated fields, found {found}")]
    RaggedLine { line: usize, expected: usize, found: usize },
    #[error("line {line}: non-numeric value {token:?}")]
    NonNumericValue { line: usize, token: String },
    #[error("line {line}: missing-value marker '?' contradicts '@missing false'")]
    MissingValueMarker { line: usize },
    #[error("line {line}: series has no values")]
    EmptySeries { line: usize },
    #[error("@equallength is true but series lengths differ")]
    InconsistentEqualLength,
    #[error("no @horizon directive and no default horizon for frequency {0:?}")]
    MissingHorizon(String),
    #[error("horizon {horizon} must be smaller than the shortest series (length {shortest})")]
    HorizonTooLarge { horizon: usize, shortest: usize },
    #[error("no valid target position in the requested region")]
    EmptyRegion,
}

/// Sampling frequency of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frequency {
    Yearly,
    Quarterly,
    Monthly,
    Weekly,
    Daily,
    Hourly,
    HalfHourly,
    Other(String),
}

impl Frequency {
    pub fn parse(token: &str) -> Frequency {
        match token {
            "yearly" => Frequency::Yearly,
            "quarterly" => Frequency::Quarterly,
            "monthly" => Frequency::Monthly,
            "weekly" => Frequency::Weekly,
            "daily" => Frequency::Daily,
            "hourly" => Frequency::Hourly,
            "half_hourly" => Frequency::HalfHourly,
            other => Frequency::Other(other.to_string()),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            Frequency::Yearly => "yearly",
            Frequency::Quarterly => "quarterly",
            Frequency::Monthly => "monthly",
            Frequency::Weekly => "weekly",
            Frequency::Daily => "daily",
            Frequency::Hourly => "hourly",
            Frequency::HalfHourly => "half_hourly",
            Frequency::Other(s) => s,
        }
    }

    /// Periods per season, used by the seasonal-naive MASE denominator.
    pub fn default_seasonality(&self) -> usize {
        match self {
            Frequency::Yearly => 1,
            Frequency::Quarterly => 4,
            Frequency::Monthly => 12,
            Frequency::Weekly => 52,
            Frequency::Daily => 7,
            Frequency::Hourly => 24,
            Frequency::HalfHourly => 48,
            Frequency::Other(_) => 1,
        }
    }

    /// Forecast horizon used when a file has no `@horizon` directive.
    pub fn default_horizon(&self) -> Option<usize> {
        match self {
            Frequency::Yearly => Some(4),
            Frequency::Quarterly => Some(8),
            Frequency::Monthly => Some(12),
            Frequency::Weekly => Some(8),
            Frequency::Daily => Some(30),
            Frequency::Hourly => Some(168),
            Frequency::HalfHourly => Some(336),
            Frequency::Other(_) => None,
        }
    }
}

/// One univariate series. Timestamps are carried verbatim and never used
/// in modeling. Missing values (only legal when the dataset declares
/// `@missing true`) are stored as NaN; the trainer rejects such datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub id: String,
    pub start: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesDataset {
    pub name: String,
    pub frequency: Frequency,
    /// Forecast horizon in steps.
    pub horizon: usize,
    /// Periods per season for the seasonal-naive reference.
    pub seasonality: usize,
    pub equal_length: bool,
    pub contains_missing: bool,
    pub series: Vec<Series>,
}

impl TimeSeriesDataset {
    pub fn min_len(&self) -> usize {
        self.series.iter().map(|s| s.values.len()).min().unwrap_or(0)
    }

    pub fn max_len(&self) -> usize {
        self.series.iter().map(|s| s.values.len()).max().unwrap_or(0)
    }
}

/// Per-series split boundaries. The test region is the last `horizon`
/// points, validation the `horizon` points before it, train the rest.
/// Series shorter than `2*horizon + 1` keep an empty validation region
/// (`short` set) and are excluded from validation sampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeriesSplit {
    pub train_end: usize,
    pub val_end: usize,
    pub test_end: usize,
    pub short: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSplits {
    pub horizon: usize,
    pub per_series: Vec<SeriesSplit>,
}

/// Index region a training target may be drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    /// Targets end before the validation region.
    Train,
    /// Targets end before the test region (retraining phase).
    TrainPlusVal,
    /// Same index range as `TrainPlusVal`; the in-sample protocol carves
    /// its validation hold-out from these positions.
    InSample,
}

/// Evaluation stage for [`make_eval_windows`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalStage {
    Validation,
    Test,
}

/// One forecasting window: `x` holds exactly `C` context points (left-padded
/// by repeating the earliest observed value), `y` the `horizon` targets.
/// `series` indexes into the dataset; `end` is one past the last target.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub series: usize,
    pub end: usize,
}

impl Window {
    pub fn target_start(&self) -> usize {
        self.end - self.y.len()
    }
}

pub fn parse_tsf(text: &str) -> Result<TimeSeriesDataset, TsfError> {
    #[derive(PartialEq)]
    enum AttrKind {
        Id,
        Start,
    }
    let mut name = String::new();
    let mut attributes: Vec<AttrKind> = Vec::new();
    let mut frequency: Option<Frequency> = None;
    let mut horizon: Option<usize> = None;
    let mut declared_missing = false;
    let mut equal_length = false;
    let mut in_data = false;
    let mut data_line = 0usize;
    let mut series = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        if !in_data {
            let line = line.trim();
            let (directive, rest) = match line.split_once(char::is_whitespace) {
                Some((d, r)) => (d, r.trim()),
                None => (line, ""),
            };
            let bad = |message: String| TsfError::MalformedHeader { line: lineno, message };
            match directive {
                "@relation" => name = rest.to_string(),
                "@attribute" => {
                    let mut it = rest.split_whitespace();
                    let attr_name = it.next().ok_or_else(|| bad("@attribute needs a name".into()))?;
                    let attr_type = it.next().ok_or_else(|| bad("@attribute needs a type".into()))?;
                    let kind = if attr_type == "date" || attr_name == "start_timestamp" {
                        AttrKind::Start
                    } else if attr_type == "string" {
                        AttrKind::Id
                    } else {
                        return Err(bad(format!("unsupported attribute {attr_name} {attr_type}")));
                    };
                    if attributes.contains(&kind) {
                        return Err(bad(format!("duplicate attribute kind for {attr_name}")));
                    }
                    attributes.push(kind);
                }
                "@frequency" => frequency = Some(Frequency::parse(rest)),
                "@horizon" => {
                    let h: usize = rest
                        .parse()
                        .map_err(|_| bad(format!("invalid @horizon {rest:?}")))?;
                    if h == 0 {
                        return Err(bad("@horizon must be >= 1".into()));
                    }
                    horizon = Some(h);
                }
                "@missing" => {
                    declared_missing = parse_bool(rest).ok_or_else(|| bad(format!("invalid @missing {rest:?}")))?;
                }
                "@equallength" => {
                    equal_length = parse_bool(rest).ok_or_else(|| bad(format!("invalid @equallength {rest:?}")))?;
                }
                "@data" => {
                    if attributes.iter().all(|k| *k != AttrKind::Id) {
                        return Err(bad("no series identifier attribute declared before @data".into()));
                    }
                    in_data = true;
                    data_line = lineno;
                }
                other => return Err(bad(format!("unknown directive {other:?}"))),
            }
        } else {
            let fields: Vec<&str> = line.split(':').collect();
            let expected = attributes.len() + 1;
            if fields.len() != expected {
                return Err(TsfError::RaggedLine { line: lineno, expected, found: fields.len() });
            }
            let mut id = String::new();
            let mut start = String::new();
            for (kind, field) in attributes.iter().zip(&fields) {
                match kind {
                    AttrKind::Id => id = field.to_string(),
                    AttrKind::Start => start = field.to_string(),
                }
            }
            let value_field = fields[attributes.len()];
            let mut values = Vec::new();
            if !value_field.trim().is_empty() {
                for token in value_field.split(',') {
                    let token = token.trim();
                    if token == "?" {
                        if !declared_missing {
                            return Err(TsfError::MissingValueMarker { line: lineno });
                        }
                        values.push(f64::NAN);
                        continue;
                    }
                    let v: f64 = token
                        .parse()
                        .map_err(|_| TsfError::NonNumericValue { line: lineno, token: token.to_string() })?;
                    if !v.is_finite() {
                        return Err(TsfError::NonNumericValue { line: lineno, token: token.to_string() });
                    }
                    values.push(v);
                }
            }
            if values.is_empty() {
                return Err(TsfError::EmptySeries { line: lineno });
            }
            series.push(Series { id, start, values });
        }
    }
    if !in_data {
        return Err(TsfError::MissingDataSection);
    }
    let frequency = frequency.ok_or(TsfError::MalformedHeader {
        line: data_line,
        message: "missing @frequency directive".into(),
    })?;
    let horizon = match horizon {
        Some(h) => h,
        None => frequency
            .default_horizon()
            .ok_or_else(|| TsfError::MissingHorizon(frequency.as_str().to_string()))?,
    };
    if equal_length {
        let mut lens = series.iter().map(|s| s.values.len());
        if let Some(first) = lens.next() {
            if lens.any(|l| l != first) {
                return Err(TsfError::InconsistentEqualLength);
            }
        }
    }
    Ok(TimeSeriesDataset {
        name,
        seasonality: frequency.default_seasonality(),
        frequency,
        horizon,
        equal_length,
        contains_missing: declared_missing,
        series,
    })
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    }
}

/// Emit a `.tsf` document that parses back to an equal dataset. Values are
/// printed with shortest round-trip formatting, so every finite f64
/// survives exactly. NaN entries serialize as `?` markers.
pub fn serialize_tsf(ds: &TimeSeriesDataset) -> String {
    let mut out = String::new();
    out.push_str(&format!("@relation {}\n", ds.name));
    out.push_str("@attribute series_name string\n");
    out.push_str("@attribute start_timestamp date\n");
    out.push_str(&format!("@frequency {}\n", ds.frequency.as_str()));
    out.push_str(&format!("@horizon {}\n", ds.horizon));
    out.push_str(&format!("@missing {}\n", ds.contains_missing));
    out.push_str(&format!("@equallength {}\n", ds.equal_length));
    out.push_str("@data\n");
    for s in &ds.series {
        out.push_str(&s.id);
        out.push(':');
        out.push_str(&s.start);
        out.push(':');
        let mut first = true;
        for v in &s.values {
            if !first {
                out.push(',');
            }
            first = false;
            if v.is_nan() {
                out.push('?');
            } else {
                out.push_str(&format!("{v}"));
            }
        }
        out.push('\n');
    }
    out
}

/// Derive per-series time-wise split boundaries for the given horizon.
pub fn split_dataset(ds: &TimeSeriesDataset, horizon: usize) -> Result<DataSplits, TsfError> {
    assert!(horizon >= 1, "horizon must be >= 1");
    let shortest = ds.min_len();
    if horizon >= shortest {
        return Err(TsfError::HorizonTooLarge { horizon, shortest });
    }
    let per_series = ds
        .series
        .iter()
        .map(|s| {
            let len = s.values.len();
            let test_end = len;
            let val_end = len - horizon;
            if len >= 2 * horizon + 1 {
                SeriesSplit { train_end: len - 2 * horizon, val_end, test_end, short: false }
            } else {
                SeriesSplit { train_end: val_end, val_end, test_end, short: true }
            }
        })
        .collect();
    Ok(DataSplits { horizon, per_series })
}

fn region_end(split: &SeriesSplit, region: Region) -> usize {
    match region {
        Region::Train => split.train_end,
        Region::TrainPlusVal | Region::InSample => split.val_end,
    }
}

/// All valid `(series, target_start)` pairs for a region. A target start
/// `t` is valid when `t >= 1` (at least one observed context point) and
/// the whole target fits inside the region.
pub fn enumerate_positions(splits: &DataSplits, region: Region) -> Vec<(usize, usize)> {
    let horizon = splits.horizon;
    let mut out = Vec::new();
    for (s, split) in splits.per_series.iter().enumerate() {
        let end = region_end(split, region);
        for t in 1..=end.saturating_sub(horizon) {
            out.push((s, t));
        }
    }
    out
}

fn window_at(values: &[f64], target_start: usize, context: usize, horizon: usize) -> Window {
    debug_assert!(target_start >= 1 && target_start + horizon <= values.len());
    let mut x = Vec::with_capacity(context);
    for i in 0..context {
        let pos = target_start as isize - context as isize + i as isize;
        x.push(values[pos.max(0) as usize]);
    }
    Window {
        x,
        y: values[target_start..target_start + horizon].to_vec(),
        series: 0,
        end: target_start + horizon,
    }
}

/// Build the window for an explicit `(series, target_start)` position.
pub fn window_for_position(
    ds: &TimeSeriesDataset,
    position: (usize, usize),
    context: usize,
    horizon: usize,
) -> Window {
    let (series, target_start) = position;
    let mut w = window_at(&ds.series[series].values, target_start, context, horizon);
    w.series = series;
    w
}

/// Draw `count` training windows uniformly over all valid
/// `(series, target_start)` pairs in the region.
pub fn sample_training_batch(
    ds: &TimeSeriesDataset,
    splits: &DataSplits,
    region: Region,
    context: usize,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Window>, TsfError> {
    assert!(count >= 1 && context >= 1);
    let horizon = splits.horizon;
    // Per-series position counts, then a cumulative index for uniform draws.
    let counts: Vec<usize> = splits
        .per_series
        .iter()
        .map(|split| region_end(split, region).saturating_sub(horizon))
        .collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(TsfError::EmptyRegion);
    }
    let mut cum = Vec::with_capacity(counts.len());
    let mut acc = 0usize;
    for c in &counts {
        acc += c;
        cum.push(acc);
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let k = rng.random_range(0..total);
        let series = cum.partition_point(|&c| c <= k);
        let offset = k - (cum[series] - counts[series]);
        let target_start = offset + 1;
        out.push(window_for_position(ds, (series, target_start), context, horizon));
    }
    Ok(out)
}

/// Sample uniformly from an explicit position list (used by the in-sample
/// protocol after removing its validation hold-out).
pub fn sample_from_positions(
    ds: &TimeSeriesDataset,
    positions: &[(usize, usize)],
    context: usize,
    horizon: usize,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Window>, TsfError> {
    if positions.is_empty() {
        return Err(TsfError::EmptyRegion);
    }
    Ok((0..count)
        .map(|_| {
            let p = positions[rng.random_range(0..positions.len())];
            window_for_position(ds, p, context, horizon)
        })
        .collect())
}

/// One evaluation window per eligible series: the stage's region as target,
/// the `context` points before it as input. Short series are skipped at
/// validation and scored best-effort at test.
pub fn make_eval_windows(
    ds: &TimeSeriesDataset,
    splits: &DataSplits,
    context: usize,
    stage: EvalStage,
) -> Vec<Window> {
    let horizon = splits.horizon;
    let mut out = Vec::new();
    for (s, split) in splits.per_series.iter().enumerate() {
        let target_start = match stage {
            EvalStage::Validation => {
                if split.short {
                    continue;
                }
                split.train_end
            }
            EvalStage::Test => split.val_end,
        };
        let mut w = window_at(&ds.series[s].values, target_start, context, horizon);
        w.series = s;
        out.push(w);
    }
    out
}
