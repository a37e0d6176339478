//! Macro-averaged F-measure, accuracy, per-instrument reports, and the
//! best-count tally across algorithms.
//!
//! Class Up is the positive class for the confusion counts; the macro
//! F-measure averages the per-class F of Up and Down, each defined as 0 when
//! its precision and recall are both 0.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::features::SampleSet;
use crate::model::{Model, ModelError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot evaluate empty prediction/label vectors")]
    EmptyInput,
    #[error("predictions ({preds}) and labels ({labels}) differ in length")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("missing report for instrument '{instrument}', algorithm '{algorithm}'")]
    MissingReport { instrument: String, algorithm: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Confusion counts from the class-Up viewpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }
}

/// Thresholds probabilities at 0.5; exactly 0.5 classifies as Down.
pub fn classify(probabilities: &[f64]) -> Vec<u8> {
    probabilities.iter().map(|&p| u8::from(p > 0.5)).collect()
}

pub fn confusion(preds: &[u8], labels: &[u8]) -> Result<ConfusionCounts, EvalError> {
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), labels: labels.len() });
    }
    if preds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut c = ConfusionCounts::default();
    for (&p, &y) in preds.iter().zip(labels) {
        match (p, y) {
            (1, 1) => c.true_pos += 1,
            (1, 0) => c.false_pos += 1,
            (0, 0) => c.true_neg += 1,
            (0, 1) => c.false_neg += 1,
            _ => unreachable!("labels are binary"),
        }
    }
    Ok(c)
}

/// Precision, recall and F for one class given its (tp, fp, fn) counts; all
/// zero-denominator cases yield 0.
fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    let f = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f)
}

/// Per-class precision/recall/F for Up and Down.
pub fn class_metrics(c: &ConfusionCounts) -> ((f64, f64, f64), (f64, f64, f64)) {
    let up = prf(c.true_pos, c.false_pos, c.false_neg);
    // Down's positives are Up's negatives.
    let down = prf(c.true_neg, c.false_neg, c.false_pos);
    (up, down)
}

/// Mean of the Up-class and Down-class F-measures.
pub fn macro_f(preds: &[u8], labels: &[u8]) -> Result<f64, EvalError> {
    let c = confusion(preds, labels)?;
    let ((_, _, f_up), (_, _, f_down)) = class_metrics(&c);
    Ok((f_up + f_down) / 2.0)
}

pub fn accuracy(preds: &[u8], labels: &[u8]) -> Result<f64, EvalError> {
    let c = confusion(preds, labels)?;
    Ok((c.true_pos + c.true_neg) as f64 / c.total() as f64)
}

/// Per-instrument scores of one model tag on one test span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub instrument: String,
    /// "B pred", "P pred", "C pred", or a custom tag.
    pub model_tag: String,
    pub macro_f: f64,
    pub accuracy: f64,
    pub precision_up: f64,
    pub recall_up: f64,
    pub f_up: f64,
    pub precision_down: f64,
    pub recall_down: f64,
    pub f_down: f64,
    pub n_samples: usize,
    pub date_start: Option<NaiveDate>,
    pub date_end: Option<NaiveDate>,
}

pub const REPORT_CSV_HEADER: &str =
    "instrument,model,macro_f,accuracy,f_up,f_down,n_samples,date_start,date_end";

impl EvalReport {
    pub fn from_scores(
        instrument: &str,
        model_tag: &str,
        preds: &[u8],
        labels: &[u8],
        date_start: Option<NaiveDate>,
        date_end: Option<NaiveDate>,
    ) -> Result<Self, EvalError> {
        let c = confusion(preds, labels)?;
        let ((precision_up, recall_up, f_up), (precision_down, recall_down, f_down)) =
            class_metrics(&c);
        Ok(Self {
            instrument: instrument.to_string(),
            model_tag: model_tag.to_string(),
            macro_f: (f_up + f_down) / 2.0,
            accuracy: (c.true_pos + c.true_neg) as f64 / c.total() as f64,
            precision_up,
            recall_up,
            f_up,
            precision_down,
            recall_down,
            f_down,
            n_samples: c.total(),
            date_start,
            date_end,
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            self.instrument,
            self.model_tag,
            self.macro_f,
            self.accuracy,
            self.f_up,
            self.f_down,
            self.n_samples,
            self.date_start.map(|d| d.to_string()).unwrap_or_default(),
            self.date_end.map(|d| d.to_string()).unwrap_or_default(),
        )
    }

    pub fn parse_csv_row(row: &str) -> Option<Self> {
        let cols: Vec<&str> = row.trim().split(',').collect();
        if cols.len() != 9 {
            return None;
        }
        Some(Self {
            instrument: cols[0].to_string(),
            model_tag: cols[1].to_string(),
            macro_f: cols[2].parse().ok()?,
            accuracy: cols[3].parse().ok()?,
            precision_up: 0.0,
            recall_up: 0.0,
            f_up: cols[4].parse().ok()?,
            precision_down: 0.0,
            recall_down: 0.0,
            f_down: cols[5].parse().ok()?,
            n_samples: cols[6].parse().ok()?,
            date_start: NaiveDate::parse_from_str(cols[7], "%Y-%m-%d").ok(),
            date_end: NaiveDate::parse_from_str(cols[8], "%Y-%m-%d").ok(),
        })
    }
}

/// Runs the model over a sample set and scores it.
pub fn evaluate_model(
    model: &Model,
    set: &SampleSet,
    model_tag: &str,
) -> Result<EvalReport, EvalError> {
    if set.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut probs = Vec::with_capacity(set.len());
    for s in &set.samples {
        let sample = Tensor::new(vec![1, set.window_len, set.n_features], s.window.clone());
        probs.push(model.forward_sample(&sample)?);
    }
    let preds = classify(&probs);
    let labels: Vec<u8> = set.samples.iter().map(|s| s.label).collect();
    let instrument = set.samples[0].instrument.clone();
    let date_start = set.samples.iter().map(|s| s.label_date).min();
    let date_end = set.samples.iter().map(|s| s.label_date).max();
    EvalReport::from_scores(&instrument, model_tag, &preds, &labels, date_start, date_end)
}

/// Awards one win per instrument to its best-macro-F algorithm; exact ties
/// split the win 1/k across the k tied algorithms, so counts always sum to
/// the number of instruments. Every instrument must have a report for every
/// algorithm.
pub fn best_count(reports: &[EvalReport]) -> Result<BTreeMap<String, f64>, EvalError> {
    let mut algorithms: Vec<String> = reports.iter().map(|r| r.model_tag.clone()).collect();
    algorithms.sort();
    algorithms.dedup();

    let mut by_instrument: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
    for r in reports {
        by_instrument
            .entry(&r.instrument)
            .or_default()
            .insert(&r.model_tag, r.macro_f);
    }

    let mut counts: BTreeMap<String, f64> = algorithms.iter().map(|a| (a.clone(), 0.0)).collect();
    for (instrument, scores) in &by_instrument {
        for algo in &algorithms {
            if !scores.contains_key(algo.as_str()) {
                return Err(EvalError::MissingReport {
                    instrument: instrument.to_string(),
                    algorithm: algo.clone(),
                });
            }
        }
        let best = scores.values().cloned().fold(f64::NEG_INFINITY, f64::max);
        let winners: Vec<&str> = scores
            .iter()
            .filter(|(_, &v)| v == best)
            .map(|(k, _)| *k)
            .collect();
        let share = 1.0 / winners.len() as f64;
        for w in winners {
            *counts.get_mut(w).unwrap() += share;
        }
    }
    Ok(counts)
}

/// Instrument-by-algorithm macro-F tables plus an Average row, as CSV and
/// aligned text.
pub struct ReportTables {
    pub csv: String,
    pub text: String,
}

pub fn render_report(reports: &[EvalReport]) -> ReportTables {
    let mut algorithms: Vec<String> = reports.iter().map(|r| r.model_tag.clone()).collect();
    algorithms.sort();
    algorithms.dedup();
    let mut instruments: Vec<String> = reports.iter().map(|r| r.instrument.clone()).collect();
    instruments.sort();
    instruments.dedup();

    let score = |inst: &str, algo: &str| -> Option<f64> {
        reports
            .iter()
            .find(|r| r.instrument == inst && r.model_tag == algo)
            .map(|r| r.macro_f)
    };

    let mut csv = String::from("instrument");
    for a in &algorithms {
        csv.push(',');
        csv.push_str(a);
    }
    csv.push('\n');

    let name_w = instruments
        .iter()
        .map(|s| s.len())
        .chain(["Average".len()])
        .max()
        .unwrap_or(8)
        .max("instrument".len());
    let col_w = algorithms.iter().map(|a| a.len().max(8)).collect::<Vec<_>>();

    let mut text = format!("{:name_w$}", "instrument");
    for (a, w) in algorithms.iter().zip(&col_w) {
        text.push_str(&format!("  {a:>w$}"));
    }
    text.push('\n');

    let mut sums = vec![0.0f64; algorithms.len()];
    let mut counts = vec![0usize; algorithms.len()];
    for inst in &instruments {
        csv.push_str(inst);
        text.push_str(&format!("{inst:name_w$}"));
        for (j, algo) in algorithms.iter().enumerate() {
            match score(inst, algo) {
                Some(v) => {
                    csv.push_str(&format!(",{v:.6}"));
                    text.push_str(&format!("  {:>w$.4}", v, w = col_w[j]));
                    sums[j] += v;
                    counts[j] += 1;
                }
                None => {
                    csv.push(',');
                    text.push_str(&format!("  {:>w$}", "-", w = col_w[j]));
                }
            }
        }
        csv.push('\n');
        text.push('\n');
    }

    csv.push_str("Average");
    text.push_str(&format!("{:name_w$}", "Average"));
    for (j, _) in algorithms.iter().enumerate() {
        if counts[j] > 0 {
            let avg = sums[j] / counts[j] as f64;
            csv.push_str(&format!(",{avg:.6}"));
            text.push_str(&format!("  {:>w$.4}", avg, w = col_w[j]));
        } else {
            csv.push(',');
            text.push_str(&format!("  {:>w$}", "-", w = col_w[j]));
        }
    }
    csv.push('\n');
    text.push('\n');

    ReportTables { csv, text }
}
