//! The 82 engineered feature columns, next-day direction labels, z-score
//! normalization, and windowing into model samples.
//!
//! Column order is frozen: index 0 is the day of week, then close, volume
//! change, momentum, rate of change, exponential moving averages, treasury
//! and corporate bond rates with their spreads and first differences, and
//! finally the relative-change block over commodities, world indices,
//! exchange rates, large U.S. companies and futures. [`FEATURES`] is the
//! single source of truth for names, order and source series.
//!
//! Values derived from history shorter than the longest moving average are
//! masked; windows never cross a masked row, so every emitted sample is fully
//! defined.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const N_FEATURES: usize = 82;

/// Leading rows masked while the longest indicator (the 200-day EMA) warms
/// up; the first valid row index equals this constant.
pub const WARMUP_ROWS: usize = 199;

/// Default history length per sample.
pub const DEFAULT_WINDOW: usize = 60;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("feature {index} ({name}) needs auxiliary source '{source_name}' which was not provided")]
    MissingSource {
        index: usize,
        name: &'static str,
        source_name: &'static str,
    },
    #[error("auxiliary series '{name}' has {len} values for {expected} dates")]
    AuxLengthMismatch {
        name: String,
        len: usize,
        expected: usize,
    },
    #[error("no training rows to fit normalization stats")]
    EmptyTrainingRows,
    #[error("row width {got} does not match {expected} features")]
    RowWidth { got: usize, expected: usize },
    #[error("series dates must be strictly increasing (violation at index {0})")]
    UnsortedDates(usize),
    #[error("close prices must be positive (index {0})")]
    NonPositiveClose(usize),
}

/// How a feature column is computed from its sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    /// Trading day of week, Monday = 0 .. Friday = 4.
    DayOfWeek,
    /// Raw close price level.
    Close,
    /// Relative change of traded volume.
    VolumeRelChange,
    /// One-day return realized k+1 days before t: close(t-k)/close(t-k-1) - 1.
    Momentum(usize),
    /// (close(t)/close(t-n) - 1) * 100.
    RateOfChange(usize),
    /// n-day EMA seeded with the SMA of the first n closes.
    Ema(usize),
    /// Auxiliary rate passed through as a level.
    RateLevel(&'static str),
    /// Pointwise difference of two auxiliary rates.
    Spread(&'static str, &'static str),
    /// First difference of an auxiliary rate.
    RateFirstDiff(&'static str),
    /// (x(t) - x(t-1)) / x(t-1) of an auxiliary series; also covers the
    /// one-day simple returns of indices, companies and futures.
    AuxRelChange(&'static str),
}

#[derive(Debug, Clone, Copy)]
pub struct FeatureDef {
    pub name: &'static str,
    pub kind: FeatureKind,
}

use FeatureKind::*;

/// The 82 feature columns in their fixed order.
pub const FEATURES: [FeatureDef; N_FEATURES] = [
    FeatureDef { name: "Day", kind: DayOfWeek },
    FeatureDef { name: "Close", kind: Close },
    FeatureDef { name: "Vol", kind: VolumeRelChange },
    FeatureDef { name: "MOM-1", kind: Momentum(1) },
    FeatureDef { name: "MOM-2", kind: Momentum(2) },
    FeatureDef { name: "MOM-3", kind: Momentum(3) },
    FeatureDef { name: "ROC-5", kind: RateOfChange(5) },
    FeatureDef { name: "ROC-10", kind: RateOfChange(10) },
    FeatureDef { name: "ROC-15", kind: RateOfChange(15) },
    FeatureDef { name: "ROC-20", kind: RateOfChange(20) },
    FeatureDef { name: "EMA-10", kind: Ema(10) },
    FeatureDef { name: "EMA-20", kind: Ema(20) },
    FeatureDef { name: "EMA-50", kind: Ema(50) },
    FeatureDef { name: "EMA-200", kind: Ema(200) },
    FeatureDef { name: "DTB4WK", kind: RateLevel("DTB4WK") },
    FeatureDef { name: "DTB3", kind: RateLevel("DTB3") },
    FeatureDef { name: "DTB6", kind: RateLevel("DTB6") },
    FeatureDef { name: "DGS5", kind: RateLevel("DGS5") },
    FeatureDef { name: "DGS10", kind: RateLevel("DGS10") },
    FeatureDef { name: "DAAA", kind: RateLevel("DAAA") },
    FeatureDef { name: "DBAA", kind: RateLevel("DBAA") },
    FeatureDef { name: "TE1", kind: Spread("DGS10", "DTB4WK") },
    FeatureDef { name: "TE2", kind: Spread("DGS10", "DTB3") },
    FeatureDef { name: "TE3", kind: Spread("DGS10", "DTB6") },
    FeatureDef { name: "TE5", kind: Spread("DTB3", "DTB4WK") },
    FeatureDef { name: "TE6", kind: Spread("DTB6", "DTB4WK") },
    FeatureDef { name: "DE1", kind: Spread("DBAA", "DAAA") },
    FeatureDef { name: "DE2", kind: Spread("DBAA", "DGS10") },
    FeatureDef { name: "DE4", kind: Spread("DBAA", "DTB6") },
    FeatureDef { name: "DE5", kind: Spread("DBAA", "DTB3") },
    FeatureDef { name: "DE6", kind: Spread("DBAA", "DTB4WK") },
    FeatureDef { name: "CTB3M", kind: RateFirstDiff("DGS3MO") },
    FeatureDef { name: "CTB6M", kind: RateFirstDiff("DGS6MO") },
    FeatureDef { name: "CTB1Y", kind: RateFirstDiff("DGS1") },
    FeatureDef { name: "Oil", kind: AuxRelChange("Oil") },
    FeatureDef { name: "Oil-Brent", kind: AuxRelChange("Oil-Brent") },
    FeatureDef { name: "Oil-WTI", kind: AuxRelChange("Oil-WTI") },
    FeatureDef { name: "Gold", kind: AuxRelChange("Gold") },
    FeatureDef { name: "Gold-F", kind: AuxRelChange("Gold-F") },
    FeatureDef { name: "XAU-USD", kind: AuxRelChange("XAU-USD") },
    FeatureDef { name: "XAG-USD", kind: AuxRelChange("XAG-USD") },
    FeatureDef { name: "Gas", kind: AuxRelChange("Gas") },
    FeatureDef { name: "Silver", kind: AuxRelChange("Silver") },
    FeatureDef { name: "Copper", kind: AuxRelChange("Copper") },
    FeatureDef { name: "IXIC", kind: AuxRelChange("IXIC") },
    FeatureDef { name: "GSPC", kind: AuxRelChange("GSPC") },
    FeatureDef { name: "DJI", kind: AuxRelChange("DJI") },
    FeatureDef { name: "NYSE", kind: AuxRelChange("NYSE") },
    FeatureDef { name: "RUSSELL", kind: AuxRelChange("RUSSELL") },
    FeatureDef { name: "HSI", kind: AuxRelChange("HSI") },
    FeatureDef { name: "SSE", kind: AuxRelChange("SSE") },
    FeatureDef { name: "FCHI", kind: AuxRelChange("FCHI") },
    FeatureDef { name: "FTSE", kind: AuxRelChange("FTSE") },
    FeatureDef { name: "GDAXI", kind: AuxRelChange("GDAXI") },
    FeatureDef { name: "USD-Y", kind: AuxRelChange("USD-Y") },
    FeatureDef { name: "USD-GBP", kind: AuxRelChange("USD-GBP") },
    FeatureDef { name: "USD-CAD", kind: AuxRelChange("USD-CAD") },
    FeatureDef { name: "USD-CNY", kind: AuxRelChange("USD-CNY") },
    FeatureDef { name: "USD-AUD", kind: AuxRelChange("USD-AUD") },
    FeatureDef { name: "USD-NZD", kind: AuxRelChange("USD-NZD") },
    FeatureDef { name: "USD-CHF", kind: AuxRelChange("USD-CHF") },
    FeatureDef { name: "USD-EUR", kind: AuxRelChange("USD-EUR") },
    FeatureDef { name: "USDX", kind: AuxRelChange("USDX") },
    FeatureDef { name: "XOM", kind: AuxRelChange("XOM") },
    FeatureDef { name: "JPM", kind: AuxRelChange("JPM") },
    FeatureDef { name: "AAPL", kind: AuxRelChange("AAPL") },
    FeatureDef { name: "MSFT", kind: AuxRelChange("MSFT") },
    FeatureDef { name: "GE", kind: AuxRelChange("GE") },
    FeatureDef { name: "JNJ", kind: AuxRelChange("JNJ") },
    FeatureDef { name: "WFC", kind: AuxRelChange("WFC") },
    FeatureDef { name: "AMZN", kind: AuxRelChange("AMZN") },
    FeatureDef { name: "FCHI-F", kind: AuxRelChange("FCHI-F") },
    FeatureDef { name: "FTSE-F", kind: AuxRelChange("FTSE-F") },
    FeatureDef { name: "GDAXI-F", kind: AuxRelChange("GDAXI-F") },
    FeatureDef { name: "HSI-F", kind: AuxRelChange("HSI-F") },
    FeatureDef { name: "Nikkei-F", kind: AuxRelChange("Nikkei-F") },
    FeatureDef { name: "KOSPI-F", kind: AuxRelChange("KOSPI-F") },
    FeatureDef { name: "IXIC-F", kind: AuxRelChange("IXIC-F") },
    FeatureDef { name: "DJI-F", kind: AuxRelChange("DJI-F") },
    FeatureDef { name: "SP-F", kind: AuxRelChange("SP-F") },
    FeatureDef { name: "RUSSELL-F", kind: AuxRelChange("RUSSELL-F") },
    FeatureDef { name: "USDX-F", kind: AuxRelChange("USDX-F") },
];

/// Auxiliary source names every full feature build requires.
pub fn required_aux_sources() -> Vec<&'static str> {
    let mut out = Vec::new();
    for def in &FEATURES {
        match def.kind {
            RateLevel(s) | RateFirstDiff(s) | AuxRelChange(s) => out.push(s),
            Spread(a, b) => {
                out.push(a);
                out.push(b);
            }
            _ => {}
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// One instrument's price history plus every auxiliary series already aligned
/// to its trading dates (`None` marks dates before the source's first
/// observation).
#[derive(Debug, Clone)]
pub struct RawSeries {
    pub instrument: String,
    pub dates: Vec<NaiveDate>,
    pub close: Vec<f64>,
    pub volume: Vec<f64>,
    pub aux: BTreeMap<String, Vec<Option<f64>>>,
}

impl RawSeries {
    pub fn new(
        instrument: String,
        dates: Vec<NaiveDate>,
        close: Vec<f64>,
        volume: Vec<f64>,
        aux: BTreeMap<String, Vec<Option<f64>>>,
    ) -> Result<Self, FeatureError> {
        for i in 1..dates.len() {
            if dates[i] <= dates[i - 1] {
                return Err(FeatureError::UnsortedDates(i));
            }
        }
        for (i, &c) in close.iter().enumerate() {
            if c <= 0.0 {
                return Err(FeatureError::NonPositiveClose(i));
            }
        }
        for (name, vals) in &aux {
            if vals.len() != dates.len() {
                return Err(FeatureError::AuxLengthMismatch {
                    name: name.clone(),
                    len: vals.len(),
                    expected: dates.len(),
                });
            }
        }
        Ok(Self { instrument, dates, close, volume, aux })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// Truncates to the first `n` dates; used by the no-lookahead checks.
    pub fn prefix(&self, n: usize) -> RawSeries {
        RawSeries {
            instrument: self.instrument.clone(),
            dates: self.dates[..n].to_vec(),
            close: self.close[..n].to_vec(),
            volume: self.volume[..n].to_vec(),
            aux: self
                .aux
                .iter()
                .map(|(k, v)| (k.clone(), v[..n].to_vec()))
                .collect(),
        }
    }
}

/// Per-instrument date-indexed table of the 82 features with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub instrument: String,
    pub dates: Vec<NaiveDate>,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.dates.len()
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * N_FEATURES + col]
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[row * N_FEATURES + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * N_FEATURES..(row + 1) * N_FEATURES]
    }

    /// True when every column of the row is defined.
    pub fn row_valid(&self, row: usize) -> bool {
        self.valid[row * N_FEATURES..(row + 1) * N_FEATURES]
            .iter()
            .all(|&v| v)
    }

    pub fn n_valid_rows(&self) -> usize {
        (0..self.n_rows()).filter(|&r| self.row_valid(r)).count()
    }

    /// Applies stored normalization stats to every defined cell.
    pub fn normalized(&self, stats: &NormStats) -> FeatureMatrix {
        let mut out = self.clone();
        for r in 0..self.n_rows() {
            for c in 0..N_FEATURES {
                let idx = r * N_FEATURES + c;
                if out.valid[idx] {
                    out.values[idx] = stats.apply_one(c, out.values[idx]);
                }
            }
        }
        out
    }

    /// CSV export: `date` plus the 82 feature names; masked cells are empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("date");
        for def in &FEATURES {
            s.push(',');
            s.push_str(def.name);
        }
        s.push('\n');
        for r in 0..self.n_rows() {
            s.push_str(&self.dates[r].to_string());
            for c in 0..N_FEATURES {
                s.push(',');
                if self.is_valid(r, c) {
                    s.push_str(&format!("{:.12e}", self.value(r, c)));
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Labels: 1 where the next close is strictly higher, else 0. The returned
/// vector has one entry per date except the last; a shorter-than-two series
/// yields no labels.
pub fn label(close: &[f64]) -> Vec<u8> {
    if close.len() < 2 {
        return Vec::new();
    }
    close.windows(2).map(|w| u8::from(w[1] > w[0])).collect()
}

/// MOM-k: the one-day return realized k+1 days before t,
/// close(t-k)/close(t-k-1) - 1. Undefined for t <= k.
pub fn momentum(close: &[f64], k: usize) -> Vec<Option<f64>> {
    (0..close.len())
        .map(|t| {
            if t > k {
                Some(close[t - k] / close[t - k - 1] - 1.0)
            } else {
                None
            }
        })
        .collect()
}

/// ROC-n in percent: (close(t)/close(t-n) - 1) * 100. Undefined for t < n.
pub fn roc(close: &[f64], n: usize) -> Vec<Option<f64>> {
    (0..close.len())
        .map(|t| {
            if t >= n {
                Some((close[t] / close[t - n] - 1.0) * 100.0)
            } else {
                None
            }
        })
        .collect()
}

/// n-day exponential moving average with multiplier 2/(n+1), seeded with the
/// simple moving average of the first n values; first defined at index n-1.
pub fn ema(close: &[f64], n: usize) -> Vec<Option<f64>> {
    let mut out = vec![None; close.len()];
    if close.len() < n || n == 0 {
        return out;
    }
    let alpha = 2.0 / (n as f64 + 1.0);
    let seed: f64 = close[..n].iter().sum::<f64>() / n as f64;
    out[n - 1] = Some(seed);
    let mut prev = seed;
    for t in n..close.len() {
        prev = alpha * close[t] + (1.0 - alpha) * prev;
        out[t] = Some(prev);
    }
    out
}

/// (x(t) - x(t-1)) / x(t-1); masked where the previous value is missing or 0.
pub fn relative_change(series: &[Option<f64>]) -> Vec<Option<f64>> {
    (0..series.len())
        .map(|t| {
            if t == 0 {
                return None;
            }
            match (series[t - 1], series[t]) {
                (Some(prev), Some(cur)) if prev != 0.0 => Some((cur - prev) / prev),
                _ => None,
            }
        })
        .collect()
}

/// x(t) - x(t-1); masked where either observation is missing.
pub fn first_diff(series: &[Option<f64>]) -> Vec<Option<f64>> {
    (0..series.len())
        .map(|t| {
            if t == 0 {
                return None;
            }
            match (series[t - 1], series[t]) {
                (Some(prev), Some(cur)) => Some(cur - prev),
                _ => None,
            }
        })
        .collect()
}

/// The ten term/default spreads in table order, computed pointwise from the
/// aligned rate series.
pub fn spread_features(
    rates: &BTreeMap<String, Vec<Option<f64>>>,
    len: usize,
) -> Result<Vec<(&'static str, Vec<Option<f64>>)>, FeatureError> {
    let mut out = Vec::new();
    for (index, def) in FEATURES.iter().enumerate() {
        if let Spread(a, b) = def.kind {
            let sa = rates.get(a).ok_or(FeatureError::MissingSource {
                index: index + 1,
                name: def.name,
                source_name: a,
            })?;
            let sb = rates.get(b).ok_or(FeatureError::MissingSource {
                index: index + 1,
                name: def.name,
                source_name: b,
            })?;
            let col = (0..len)
                .map(|t| match (sa.get(t).copied().flatten(), sb.get(t).copied().flatten()) {
                    (Some(x), Some(y)) => Some(x - y),
                    _ => None,
                })
                .collect();
            out.push((def.name, col));
        }
    }
    Ok(out)
}

fn aux_column<'a>(
    raw: &'a RawSeries,
    index: usize,
    name: &'static str,
    source: &'static str,
) -> Result<&'a Vec<Option<f64>>, FeatureError> {
    raw.aux.get(source).ok_or(FeatureError::MissingSource {
        index: index + 1,
        name,
        source_name: source,
    })
}

/// Builds the full 82-column matrix for one instrument. Rows where the
/// longest moving average is still warming up are masked across all columns.
pub fn assemble_features(raw: &RawSeries) -> Result<FeatureMatrix, FeatureError> {
    let n = raw.len();
    let mut columns: Vec<Vec<Option<f64>>> = Vec::with_capacity(N_FEATURES);

    let volume_opt: Vec<Option<f64>> = raw.volume.iter().copied().map(Some).collect();

    for (index, def) in FEATURES.iter().enumerate() {
        let col: Vec<Option<f64>> = match def.kind {
            DayOfWeek => raw
                .dates
                .iter()
                .map(|d| {
                    Some(match d.weekday() {
                        Weekday::Mon => 0.0,
                        Weekday::Tue => 1.0,
                        Weekday::Wed => 2.0,
                        Weekday::Thu => 3.0,
                        Weekday::Fri => 4.0,
                        // Weekend sessions are unusual but not invalid input.
                        Weekday::Sat => 5.0,
                        Weekday::Sun => 6.0,
                    })
                })
                .collect(),
            Close => raw.close.iter().copied().map(Some).collect(),
            VolumeRelChange => relative_change(&volume_opt),
            Momentum(k) => momentum(&raw.close, k),
            RateOfChange(w) => roc(&raw.close, w),
            Ema(w) => ema(&raw.close, w),
            RateLevel(source) => aux_column(raw, index, def.name, source)?.clone(),
            Spread(a, b) => {
                let sa = aux_column(raw, index, def.name, a)?;
                let sb = aux_column(raw, index, def.name, b)?;
                sa.iter()
                    .zip(sb)
                    .map(|(x, y)| match (x, y) {
                        (Some(x), Some(y)) => Some(x - y),
                        _ => None,
                    })
                    .collect()
            }
            RateFirstDiff(source) => first_diff(aux_column(raw, index, def.name, source)?),
            AuxRelChange(source) => relative_change(aux_column(raw, index, def.name, source)?),
        };
        debug_assert_eq!(col.len(), n);
        columns.push(col);
    }

    let mut values = vec![0.0; n * N_FEATURES];
    let mut valid = vec![false; n * N_FEATURES];
    for (c, col) in columns.iter().enumerate() {
        for (r, cell) in col.iter().enumerate() {
            let idx = r * N_FEATURES + c;
            if let Some(v) = cell {
                if r >= WARMUP_ROWS {
                    values[idx] = *v;
                    valid[idx] = true;
                }
            }
        }
    }

    Ok(FeatureMatrix {
        instrument: raw.instrument.clone(),
        dates: raw.dates.clone(),
        values,
        valid,
    })
}

/// Per-feature mean and population standard deviation fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Columns with zero spread normalize to 0.
    pub fn apply_one(&self, col: usize, x: f64) -> f64 {
        if self.std[col] == 0.0 {
            0.0
        } else {
            (x - self.mean[col]) / self.std[col]
        }
    }
}

/// Fits per-feature mean and population std (divide by N) over training rows.
pub fn zscore_fit(rows: &[&[f64]]) -> Result<NormStats, FeatureError> {
    if rows.is_empty() {
        return Err(FeatureError::EmptyTrainingRows);
    }
    let width = rows[0].len();
    for r in rows {
        if r.len() != width {
            return Err(FeatureError::RowWidth { got: r.len(), expected: width });
        }
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; width];
    for r in rows {
        for (m, &v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; width];
    for r in rows {
        for ((s, &v), &m) in var.iter_mut().zip(r.iter()).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
    Ok(NormStats { mean, std })
}

/// Fits on the given rows and returns them normalized.
pub fn zscore_fit_transform(rows: &[&[f64]]) -> Result<(NormStats, Vec<Vec<f64>>), FeatureError> {
    let stats = zscore_fit(rows)?;
    let normalized = zscore_apply(&stats, rows);
    Ok((stats, normalized))
}

/// Applies previously fitted stats unchanged.
pub fn zscore_apply(stats: &NormStats, rows: &[&[f64]]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .map(|(c, &v)| stats.apply_one(c, v))
                .collect()
        })
        .collect()
}

/// One windowed training sample: `window_len` consecutive valid feature rows
/// ending at `date`, labeled by the close move into `label_date`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub instrument: String,
    pub date: NaiveDate,
    pub label_date: NaiveDate,
    /// Row-major `[window_len, n_features]`.
    pub window: Vec<f64>,
    pub label: u8,
}

/// Windowed samples plus the normalization stats they were produced under.
#[derive(Debug, Clone, Default)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
    pub stats: Option<NormStats>,
    pub window_len: usize,
    pub n_features: usize,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Fraction of Up labels.
    pub fn up_rate(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().filter(|s| s.label == 1).count() as f64 / self.samples.len() as f64
    }

    /// Concatenates sets with identical geometry; order is preserved.
    pub fn concat(sets: &[&SampleSet]) -> SampleSet {
        let mut out = SampleSet::default();
        for s in sets {
            if out.window_len == 0 {
                out.window_len = s.window_len;
                out.n_features = s.n_features;
            }
            assert_eq!(out.window_len, s.window_len, "window lengths differ");
            assert_eq!(out.n_features, s.n_features, "feature widths differ");
            out.samples.extend(s.samples.iter().cloned());
        }
        out
    }
}

/// Cuts the matrix into samples: one per row `t` whose trailing `window_len`
/// rows are all fully valid and whose next-day label exists. Windows never
/// span masked rows.
pub fn window(matrix: &FeatureMatrix, labels: &[u8], window_len: usize) -> SampleSet {
    let n = matrix.n_rows();
    let mut samples = Vec::new();
    if n >= window_len && !labels.is_empty() {
        let row_ok: Vec<bool> = (0..n).map(|r| matrix.row_valid(r)).collect();
        let mut run = 0usize;
        for t in 0..n {
            run = if row_ok[t] { run + 1 } else { 0 };
            if run >= window_len && t < labels.len() {
                let start = t + 1 - window_len;
                let mut w = Vec::with_capacity(window_len * N_FEATURES);
                for r in start..=t {
                    w.extend_from_slice(matrix.row(r));
                }
                samples.push(Sample {
                    instrument: matrix.instrument.clone(),
                    date: matrix.dates[t],
                    label_date: matrix.dates[t + 1],
                    window: w,
                    label: labels[t],
                });
            }
        }
    }
    SampleSet {
        samples,
        stats: None,
        window_len,
        n_features: N_FEATURES,
    }
}
