//! CSV ingestion, trading-calendar alignment across heterogeneous sources,
//! and time-gapped train/validation/test splits.
//!
//! Input schemas (UTF-8, `.` decimal separator, ISO-8601 dates):
//! - instruments: `date,open,high,low,close,volume`
//! - auxiliary series: `date,value`
//!
//! A sample belongs to the partition of its label date: windows may reach
//! back across a partition boundary (inputs are past data), but label dates
//! never overlap between partitions.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureError, RawSeries, SampleSet};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },
    #[error("{path}: header {got:?} does not match expected {expected:?}")]
    Header {
        path: String,
        expected: Vec<String>,
        got: Vec<String>,
    },
    #[error("{path}:{line}: duplicate date {date}")]
    DuplicateDate {
        path: String,
        line: u64,
        date: NaiveDate,
    },
    #[error("{path}:{line}: non-positive close {value}")]
    NonPositiveClose {
        path: String,
        line: u64,
        value: f64,
    },
    #[error("the {partition} partition is empty under this split")]
    EmptyPartition { partition: &'static str },
    #[error("split spec invalid: {0}")]
    BadSpec(String),
    #[error("sample file: {0}")]
    SampleFormat(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// One instrument's OHLCV history, date-sorted.
#[derive(Debug, Clone)]
pub struct InstrumentSeries {
    pub instrument: String,
    pub dates: Vec<NaiveDate>,
    pub open: Vec<f64>,
    pub high: Vec<f64>,
    pub low: Vec<f64>,
    pub close: Vec<f64>,
    pub volume: Vec<f64>,
}

/// A named auxiliary series (`date,value`), date-sorted.
#[derive(Debug, Clone)]
pub struct AuxSeries {
    pub name: String,
    pub dates: Vec<NaiveDate>,
    pub values: Vec<f64>,
}

fn parse_date(path: &str, line: u64, s: &str) -> Result<NaiveDate, DataError> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|e| DataError::Parse {
        path: path.into(),
        line,
        message: format!("bad date '{s}': {e}"),
    })
}

fn parse_value(path: &str, line: u64, field: &str, s: &str) -> Result<f64, DataError> {
    s.trim().parse::<f64>().map_err(|e| DataError::Parse {
        path: path.into(),
        line,
        message: format!("bad {field} '{s}': {e}"),
    })
}

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>, DataError> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => DataError::Io {
                path: path.display().to_string(),
                source: std::io::Error::other(e.to_string()),
            },
            _ => DataError::Parse {
                path: path.display().to_string(),
                line: 1,
                message: e.to_string(),
            },
        })
}

fn check_header(path: &str, expected: &[&str], got: &csv::StringRecord) -> Result<(), DataError> {
    let got_cols: Vec<String> = got.iter().map(|s| s.trim().to_lowercase()).collect();
    if got_cols != expected {
        return Err(DataError::Header {
            path: path.into(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
            got: got_cols,
        });
    }
    Ok(())
}

fn record_line(record: &csv::StringRecord, fallback: u64) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(fallback)
}

/// Loads an instrument CSV. Rows are sorted by date; duplicate dates and
/// non-positive closes are rejected with their line numbers.
pub fn load_instrument_csv(path: &Path, instrument: &str) -> Result<InstrumentSeries, DataError> {
    let pathstr = path.display().to_string();
    let mut reader = open_reader(path)?;
    check_header(
        &pathstr,
        &["date", "open", "high", "low", "close", "volume"],
        reader.headers().map_err(|e| DataError::Parse {
            path: pathstr.clone(),
            line: 1,
            message: e.to_string(),
        })?,
    )?;

    let mut rows: Vec<(NaiveDate, u64, [f64; 5])> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::Parse {
            path: pathstr.clone(),
            line: e.position().map(|p| p.line()).unwrap_or(i as u64 + 2),
            message: e.to_string(),
        })?;
        let line = record_line(&record, i as u64 + 2);
        if record.len() != 6 {
            return Err(DataError::Parse {
                path: pathstr.clone(),
                line,
                message: format!("expected 6 fields, got {}", record.len()),
            });
        }
        let date = parse_date(&pathstr, line, &record[0])?;
        let open = parse_value(&pathstr, line, "open", &record[1])?;
        let high = parse_value(&pathstr, line, "high", &record[2])?;
        let low = parse_value(&pathstr, line, "low", &record[3])?;
        let close = parse_value(&pathstr, line, "close", &record[4])?;
        let volume = parse_value(&pathstr, line, "volume", &record[5])?;
        if close <= 0.0 {
            return Err(DataError::NonPositiveClose { path: pathstr, line, value: close });
        }
        rows.push((date, line, [open, high, low, close, volume]));
    }
    rows.sort_by_key(|(d, _, _)| *d);
    for pair in rows.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(DataError::DuplicateDate {
                path: pathstr,
                line: pair[1].1,
                date: pair[1].0,
            });
        }
    }

    let mut out = InstrumentSeries {
        instrument: instrument.to_string(),
        dates: Vec::with_capacity(rows.len()),
        open: Vec::with_capacity(rows.len()),
        high: Vec::with_capacity(rows.len()),
        low: Vec::with_capacity(rows.len()),
        close: Vec::with_capacity(rows.len()),
        volume: Vec::with_capacity(rows.len()),
    };
    for (date, _, [o, h, l, c, v]) in rows {
        out.dates.push(date);
        out.open.push(o);
        out.high.push(h);
        out.low.push(l);
        out.close.push(c);
        out.volume.push(v);
    }
    Ok(out)
}

/// Loads a `date,value` auxiliary CSV, date-sorted, duplicates rejected.
pub fn load_aux_csv(path: &Path, name: &str) -> Result<AuxSeries, DataError> {
    let pathstr = path.display().to_string();
    let mut reader = open_reader(path)?;
    check_header(
        &pathstr,
        &["date", "value"],
        reader.headers().map_err(|e| DataError::Parse {
            path: pathstr.clone(),
            line: 1,
            message: e.to_string(),
        })?,
    )?;

    let mut rows: Vec<(NaiveDate, u64, f64)> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::Parse {
            path: pathstr.clone(),
            line: e.position().map(|p| p.line()).unwrap_or(i as u64 + 2),
            message: e.to_string(),
        })?;
        let line = record_line(&record, i as u64 + 2);
        if record.len() != 2 {
            return Err(DataError::Parse {
                path: pathstr.clone(),
                line,
                message: format!("expected 2 fields, got {}", record.len()),
            });
        }
        let date = parse_date(&pathstr, line, &record[0])?;
        let value = parse_value(&pathstr, line, "value", &record[1])?;
        rows.push((date, line, value));
    }
    rows.sort_by_key(|(d, _, _)| *d);
    for pair in rows.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(DataError::DuplicateDate {
                path: pathstr,
                line: pair[1].1,
                date: pair[1].0,
            });
        }
    }
    Ok(AuxSeries {
        name: name.to_string(),
        dates: rows.iter().map(|(d, _, _)| *d).collect(),
        values: rows.into_iter().map(|(_, _, v)| v).collect(),
    })
}

/// Forward-fills an auxiliary series onto the target trading dates: each
/// target date takes the most recent observation at or before it; dates
/// before the first observation are masked.
pub fn align_calendar(target_dates: &[NaiveDate], aux: &AuxSeries) -> Vec<Option<f64>> {
    let mut out = Vec::with_capacity(target_dates.len());
    let mut idx = 0usize; // next aux observation not yet consumed
    let mut current: Option<f64> = None;
    for &date in target_dates {
        while idx < aux.dates.len() && aux.dates[idx] <= date {
            current = Some(aux.values[idx]);
            idx += 1;
        }
        out.push(current);
    }
    out
}

/// Aligns every auxiliary series onto the instrument's calendar and bundles
/// the result for the feature pipeline.
pub fn build_raw_series(
    instrument: &InstrumentSeries,
    aux_list: &[AuxSeries],
) -> Result<RawSeries, DataError> {
    let mut aux = BTreeMap::new();
    for series in aux_list {
        aux.insert(series.name.clone(), align_calendar(&instrument.dates, series));
    }
    Ok(RawSeries::new(
        instrument.instrument.clone(),
        instrument.dates.clone(),
        instrument.close.clone(),
        instrument.volume.clone(),
        aux,
    )?)
}

/// Date geometry of a time-gapped split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Last label date (inclusive) of the train+validation span.
    pub train_end: NaiveDate,
    /// Chronological tail fraction of the pre-gap samples used for validation.
    pub val_fraction: f64,
    pub test_start: NaiveDate,
    pub test_end: NaiveDate,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.test_start < self.train_end {
            return Err(DataError::BadSpec(format!(
                "test_start {} before train_end {}",
                self.test_start, self.train_end
            )));
        }
        if self.test_end < self.test_start {
            return Err(DataError::BadSpec(format!(
                "test_end {} before test_start {}",
                self.test_end, self.test_start
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(DataError::BadSpec(format!(
                "val_fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitProvenance {
    pub instrument: String,
    pub spec: SplitSpec,
    /// Samples dropped inside the gap or beyond test_end.
    pub discarded: usize,
    pub pipeline_version: String,
}

/// Train/validation/test sample sets with disjoint, ordered label dates.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: SampleSet,
    pub validation: SampleSet,
    pub test: SampleSet,
    pub provenance: SplitProvenance,
}

/// Partitions samples by label date: test takes `[test_start, test_end]`,
/// the pre-gap span (label date <= train_end and < test_start) splits
/// chronologically into train then validation, and everything else is
/// discarded.
pub fn split(samples: &SampleSet, spec: &SplitSpec) -> Result<DatasetSplit, DataError> {
    spec.validate()?;
    let instrument = samples
        .samples
        .first()
        .map(|s| s.instrument.clone())
        .unwrap_or_default();

    let mut pre: Vec<crate::features::Sample> = Vec::new();
    let mut test: Vec<crate::features::Sample> = Vec::new();
    let mut discarded = 0usize;
    for s in &samples.samples {
        let d = s.label_date;
        if d >= spec.test_start && d <= spec.test_end {
            test.push(s.clone());
        } else if d <= spec.train_end && d < spec.test_start {
            pre.push(s.clone());
        } else {
            discarded += 1;
        }
    }
    pre.sort_by(|a, b| (a.label_date, &a.instrument).cmp(&(b.label_date, &b.instrument)));
    test.sort_by(|a, b| (a.label_date, &a.instrument).cmp(&(b.label_date, &b.instrument)));

    let n_train = ((1.0 - spec.val_fraction) * pre.len() as f64).floor() as usize;
    let validation: Vec<_> = pre.split_off(n_train);
    let train = pre;

    if train.is_empty() {
        return Err(DataError::EmptyPartition { partition: "train" });
    }
    if validation.is_empty() {
        return Err(DataError::EmptyPartition { partition: "validation" });
    }
    if test.is_empty() {
        return Err(DataError::EmptyPartition { partition: "test" });
    }

    let mk = |list: Vec<crate::features::Sample>| SampleSet {
        samples: list,
        stats: samples.stats.clone(),
        window_len: samples.window_len,
        n_features: samples.n_features,
    };

    Ok(DatasetSplit {
        train: mk(train),
        validation: mk(validation),
        test: mk(test),
        provenance: SplitProvenance {
            instrument,
            spec: *spec,
            discarded,
            pipeline_version: env!("CARGO_PKG_VERSION").to_string(),
        },
    })
}

/// Full per-instrument pipeline: assemble the raw feature matrix, find the
/// train boundary from the split geometry, fit normalization stats on the
/// training span only (valid rows dated at or before the last train sample),
/// normalize, window, and split.
///
/// Returns the raw (unnormalized) matrix for export plus the normalized,
/// split samples.
pub fn featurize_and_split(
    raw: &crate::features::RawSeries,
    spec: &SplitSpec,
    window_len: usize,
) -> Result<(crate::features::FeatureMatrix, DatasetSplit), DataError> {
    use crate::features::{assemble_features, label, window, zscore_fit};

    let matrix = assemble_features(raw)?;
    let labels = label(&raw.close);

    // Raw windows locate the usable sample dates and the train boundary.
    let raw_samples = window(&matrix, &labels, window_len);
    let presplit = split(&raw_samples, spec)?;
    let train_boundary = presplit
        .train
        .samples
        .iter()
        .map(|s| s.date)
        .max()
        .expect("train partition is non-empty");

    let fit_rows: Vec<&[f64]> = (0..matrix.n_rows())
        .filter(|&r| matrix.row_valid(r) && matrix.dates[r] <= train_boundary)
        .map(|r| matrix.row(r))
        .collect();
    let stats = zscore_fit(&fit_rows)?;

    let normalized = matrix.normalized(&stats);
    let mut samples = window(&normalized, &labels, window_len);
    samples.stats = Some(stats);
    let out = split(&samples, spec)?;
    Ok((matrix, out))
}

pub const SAMPLES_FORMAT_VERSION: u16 = 1;
const SAMPLES_MAGIC: &[u8; 4] = b"UCNS";

#[derive(Serialize, Deserialize)]
struct SamplesHeader {
    provenance: SplitProvenance,
    window_len: usize,
    n_features: usize,
    stats: Option<crate::features::NormStats>,
    counts: [usize; 3],
}

fn push_sample(out: &mut Vec<u8>, s: &crate::features::Sample) {
    let date = s.date.format("%Y-%m-%d").to_string();
    let label_date = s.label_date.format("%Y-%m-%d").to_string();
    out.extend_from_slice(date.as_bytes());
    out.extend_from_slice(label_date.as_bytes());
    out.push(s.label);
    for v in &s.window {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a split to the binary sample format consumed by training:
/// magic "UCNS", version, JSON header, then per-partition fixed-size records
/// (ISO dates, label byte, little-endian f64 window), CRC-32 trailer.
pub fn write_samples_bin(split: &DatasetSplit) -> Vec<u8> {
    let header = SamplesHeader {
        provenance: split.provenance.clone(),
        window_len: split.train.window_len,
        n_features: split.train.n_features,
        stats: split.train.stats.clone(),
        counts: [split.train.len(), split.validation.len(), split.test.len()],
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(SAMPLES_MAGIC);
    out.extend_from_slice(&SAMPLES_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for set in [&split.train, &split.validation, &split.test] {
        for s in &set.samples {
            push_sample(&mut out, s);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn read_samples_bin(bytes: &[u8]) -> Result<DatasetSplit, DataError> {
    let fail = |msg: &str| DataError::SampleFormat(msg.to_string());
    if bytes.len() < 14 {
        return Err(fail("truncated"));
    }
    if &bytes[0..4] != SAMPLES_MAGIC {
        return Err(fail("bad magic bytes"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != SAMPLES_FORMAT_VERSION {
        return Err(DataError::SampleFormat(format!("unsupported version {version}")));
    }
    let body_len = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
    if stored != crc32fast::hash(&bytes[..body_len]) {
        return Err(fail("checksum mismatch"));
    }
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    if 10 + header_len > body_len {
        return Err(fail("truncated header"));
    }
    let header: SamplesHeader = serde_json::from_slice(&bytes[10..10 + header_len])
        .map_err(|e| DataError::SampleFormat(format!("malformed header: {e}")))?;

    let record = 10 + 10 + 1 + header.window_len * header.n_features * 8;
    let mut offset = 10 + header_len;
    let mut read_set = |count: usize| -> Result<SampleSet, DataError> {
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            if offset + record > body_len {
                return Err(DataError::SampleFormat("truncated records".into()));
            }
            let date_str = std::str::from_utf8(&bytes[offset..offset + 10])
                .map_err(|_| DataError::SampleFormat("bad date bytes".into()))?;
            let label_str = std::str::from_utf8(&bytes[offset + 10..offset + 20])
                .map_err(|_| DataError::SampleFormat("bad date bytes".into()))?;
            let date = NaiveDate::parse_from_str(date_str, "%Y-%m-%d")
                .map_err(|e| DataError::SampleFormat(format!("bad date: {e}")))?;
            let label_date = NaiveDate::parse_from_str(label_str, "%Y-%m-%d")
                .map_err(|e| DataError::SampleFormat(format!("bad date: {e}")))?;
            let label = bytes[offset + 20];
            let mut window = Vec::with_capacity(header.window_len * header.n_features);
            let wstart = offset + 21;
            for chunk in bytes[wstart..offset + record].chunks_exact(8) {
                window.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            samples.push(crate::features::Sample {
                instrument: header.provenance.instrument.clone(),
                date,
                label_date,
                window,
                label,
            });
            offset += record;
        }
        Ok(SampleSet {
            samples,
            stats: header.stats.clone(),
            window_len: header.window_len,
            n_features: header.n_features,
        })
    };

    let train = read_set(header.counts[0])?;
    let validation = read_set(header.counts[1])?;
    let test = read_set(header.counts[2])?;
    if offset != body_len {
        return Err(fail("trailing bytes"));
    }
    Ok(DatasetSplit { train, validation, test, provenance: header.provenance })
}
