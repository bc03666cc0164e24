//! Multi-label evaluation over the 26-label taxonomy. All reported values are
//! percentages.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::Stratum;
use crate::taxonomy::{EmotionLabel, LabelSet, LABEL_COUNT};

pub const DEFAULT_RESAMPLES: usize = 1000;
pub const MIN_RESAMPLES: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("nothing to evaluate")]
    EmptyEvaluation,
    #[error("record {0} has no per-label scores")]
    MissingScores(usize),
    #[error("record {index} has {len} scores, expected {LABEL_COUNT}")]
    ScoreLength { index: usize, len: usize },
    #[error("record {0} has no stratum")]
    MissingStratum(usize),
    #[error("bootstrap needs at least {MIN_RESAMPLES} resamples, got {0}")]
    Resamples(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub truth: LabelSet,
    pub predicted: LabelSet,
    /// One score per label in canonical order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stratum: Option<Stratum>,
}

impl PredictionRecord {
    pub fn new(truth: LabelSet, predicted: LabelSet) -> Self {
        PredictionRecord {
            truth,
            predicted,
            scores: None,
            stratum: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Precision,
    Recall,
    F1,
    Hamming,
    SubsetAccuracy,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Precision,
        Metric::Recall,
        Metric::F1,
        Metric::Hamming,
        Metric::SubsetAccuracy,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardErrors {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub hamming: f64,
    pub subset_accuracy: f64,
    pub resamples: usize,
    pub method: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub hamming: f64,
    pub subset_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standard_errors: Option<StandardErrors>,
    /// Only for predictors that emit per-label scores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_average_precision: Option<f64>,
    pub n: usize,
}

impl MetricsReport {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Precision => self.precision,
            Metric::Recall => self.recall,
            Metric::F1 => self.f1,
            Metric::Hamming => self.hamming,
            Metric::SubsetAccuracy => self.subset_accuracy,
        }
    }
}

/// Per-class confusion counts plus the per-sample tallies.
#[derive(Debug, Clone, Default)]
struct Counts {
    tp: [u64; LABEL_COUNT],
    fp: [u64; LABEL_COUNT],
    fn_: [u64; LABEL_COUNT],
    wrong_bits: u64,
    exact: u64,
    n: u64,
}

impl Counts {
    fn add(&mut self, truth: LabelSet, predicted: LabelSet) {
        let t = truth.bits();
        let p = predicted.bits();
        for c in 0..LABEL_COUNT {
            let bit = 1 << c;
            match (t & bit != 0, p & bit != 0) {
                (true, true) => self.tp[c] += 1,
                (false, true) => self.fp[c] += 1,
                (true, false) => self.fn_[c] += 1,
                (false, false) => {}
            }
        }
        self.wrong_bits += u64::from((t ^ p).count_ones());
        self.exact += u64::from(t == p);
        self.n += 1;
    }

    fn ratio(num: u64, den: u64) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    fn report(&self) -> MetricsReport {
        let classes = LABEL_COUNT as f64;
        let mut p = 0.0;
        let mut r = 0.0;
        let mut f = 0.0;
        for c in 0..LABEL_COUNT {
            p += Self::ratio(self.tp[c], self.tp[c] + self.fp[c]);
            r += Self::ratio(self.tp[c], self.tp[c] + self.fn_[c]);
            f += Self::ratio(2 * self.tp[c], 2 * self.tp[c] + self.fp[c] + self.fn_[c]);
        }
        let n = self.n as f64;
        MetricsReport {
            precision: 100.0 * p / classes,
            recall: 100.0 * r / classes,
            f1: 100.0 * f / classes,
            hamming: 100.0 * self.wrong_bits as f64 / (n * classes),
            subset_accuracy: 100.0 * self.exact as f64 / n,
            standard_errors: None,
            mean_average_precision: None,
            n: self.n as usize,
        }
    }
}

fn pairs_report(pairs: impl Iterator<Item = (LabelSet, LabelSet)>) -> Result<MetricsReport, MetricsError> {
    let mut counts = Counts::default();
    for (t, p) in pairs {
        counts.add(t, p);
    }
    if counts.n == 0 {
        return Err(MetricsError::EmptyEvaluation);
    }
    Ok(counts.report())
}

/// Macro precision/recall/F1 (a class with zero denominator counts as 0),
/// hamming loss and subset accuracy.
pub fn evaluate(records: &[PredictionRecord]) -> Result<MetricsReport, MetricsError> {
    pairs_report(records.iter().map(|r| (r.truth, r.predicted)))
}

/// Average precision of one ranking. Samples with equal scores share a
/// threshold. `None` when there are no positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let total_pos = positive.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ap = 0.0;
    let mut seen = 0usize;
    let mut tp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut group_tp = 0;
        while i < order.len() && scores[order[i]] == s {
            group_tp += usize::from(positive[order[i]]);
            seen += 1;
            i += 1;
        }
        tp += group_tp;
        if group_tp > 0 {
            ap += (group_tp as f64 / total_pos as f64) * (tp as f64 / seen as f64);
        }
    }
    Some(ap)
}

/// Macro average precision over classes with at least one positive, percent.
pub fn mean_average_precision(records: &[PredictionRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyEvaluation);
    }
    let mut columns = vec![Vec::with_capacity(records.len()); LABEL_COUNT];
    for (i, r) in records.iter().enumerate() {
        let scores = r.scores.as_ref().ok_or(MetricsError::MissingScores(i))?;
        if scores.len() != LABEL_COUNT {
            return Err(MetricsError::ScoreLength {
                index: i,
                len: scores.len(),
            });
        }
        for (c, col) in columns.iter_mut().enumerate() {
            col.push(scores[c]);
        }
    }
    let mut total = 0.0;
    let mut classes = 0;
    for label in EmotionLabel::ALL {
        let positive: Vec<bool> = records.iter().map(|r| r.truth.contains(label)).collect();
        if let Some(ap) = average_precision(&columns[label.index()], &positive) {
            total += ap;
            classes += 1;
        }
    }
    if classes == 0 {
        return Err(MetricsError::EmptyEvaluation);
    }
    Ok(100.0 * total / classes as f64)
}

fn resample_reports(
    records: &[PredictionRecord],
    resamples: usize,
    seed: u64,
) -> Result<Vec<MetricsReport>, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyEvaluation);
    }
    if resamples < MIN_RESAMPLES {
        return Err(MetricsError::Resamples(resamples));
    }
    let n = records.len();
    Ok((0..resamples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut counts = Counts::default();
            for _ in 0..n {
                let r = &records[rng.random_range(0..n)];
                counts.add(r.truth, r.predicted);
            }
            counts.report()
        })
        .collect())
}

fn sample_std(values: impl Iterator<Item = f64>) -> f64 {
    let values: Vec<f64> = values.collect();
    let n = values.len() as f64;
    // shifted by the first value so identical inputs give exactly zero
    let shift = values[0];
    let mean = values.iter().map(|v| v - shift).sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - shift - mean).powi(2)).sum();
    (ss / (n - 1.0)).sqrt()
}

/// Sample standard deviation of `metric` over seeded with-replacement
/// resamples. Resample `i` draws from stream `i` of a generator seeded with
/// `seed`, so the result does not depend on scheduling.
pub fn bootstrap_se(
    records: &[PredictionRecord],
    metric: Metric,
    resamples: usize,
    seed: u64,
) -> Result<f64, MetricsError> {
    let reports = resample_reports(records, resamples, seed)?;
    Ok(sample_std(reports.iter().map(|r| r.get(metric))))
}

/// [`evaluate`] plus bootstrap standard errors for every field.
pub fn evaluate_with_se(
    records: &[PredictionRecord],
    resamples: usize,
    seed: u64,
) -> Result<MetricsReport, MetricsError> {
    let mut report = evaluate(records)?;
    let reports = resample_reports(records, resamples, seed)?;
    let se = |m: Metric| sample_std(reports.iter().map(move |r| r.get(m)));
    report.standard_errors = Some(StandardErrors {
        precision: se(Metric::Precision),
        recall: se(Metric::Recall),
        f1: se(Metric::F1),
        hamming: se(Metric::Hamming),
        subset_accuracy: se(Metric::SubsetAccuracy),
        resamples,
        method: "bootstrap SE".into(),
    });
    Ok(report)
}

/// One report per non-empty person-count stratum.
pub fn stratified_evaluate(
    records: &[PredictionRecord],
) -> Result<BTreeMap<Stratum, MetricsReport>, MetricsError> {
    let mut groups: BTreeMap<Stratum, Vec<PredictionRecord>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let s = r.stratum.ok_or(MetricsError::MissingStratum(i))?;
        groups.entry(s).or_default().push(r.clone());
    }
    groups
        .into_iter()
        .map(|(s, rs)| evaluate(&rs).map(|rep| (s, rep)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Structured,
    Table,
}

const COLUMNS: [(&str, Metric); 5] = [
    ("Precision", Metric::Precision),
    ("Recall", Metric::Recall),
    ("F1", Metric::F1),
    ("Hamming", Metric::Hamming),
    ("S-acc", Metric::SubsetAccuracy),
];

fn se_of(se: &StandardErrors, metric: Metric) -> f64 {
    match metric {
        Metric::Precision => se.precision,
        Metric::Recall => se.recall,
        Metric::F1 => se.f1,
        Metric::Hamming => se.hamming,
        Metric::SubsetAccuracy => se.subset_accuracy,
    }
}

/// Serializes named reports. The table uses two decimals and the column
/// order Precision, Recall, F1, Hamming, S-acc.
pub fn emit_report(rows: &[(String, MetricsReport)], format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Structured => {
            let value: Vec<serde_json::Value> = rows
                .iter()
                .map(|(name, rep)| {
                    let mut v = serde_json::to_value(rep).expect("report serializes");
                    v["name"] = serde_json::Value::String(name.clone());
                    v
                })
                .collect();
            let mut out = serde_json::to_vec_pretty(&value).expect("report serializes");
            out.push(b'\n');
            out
        }
        ReportFormat::Table => {
            let cells: Vec<Vec<String>> = rows
                .iter()
                .map(|(name, rep)| {
                    let mut row = vec![name.clone()];
                    for (_, m) in COLUMNS {
                        row.push(match &rep.standard_errors {
                            Some(se) => format!("{:.2} ± {:.2}", rep.get(m), se_of(se, m)),
                            None => format!("{:.2}", rep.get(m)),
                        });
                    }
                    row.push(rep.n.to_string());
                    row
                })
                .collect();
            let mut header = vec!["Model".to_string()];
            header.extend(COLUMNS.iter().map(|(h, _)| h.to_string()));
            header.push("n".into());
            let widths: Vec<usize> = (0..header.len())
                .map(|c| {
                    cells
                        .iter()
                        .map(|r| r[c].chars().count())
                        .chain([header[c].len()])
                        .max()
                        .unwrap()
                })
                .collect();
            let mut out = String::new();
            for row in std::iter::once(&header).chain(&cells) {
                let line: Vec<String> = row
                    .iter()
                    .enumerate()
                    .map(|(c, s)| {
                        if c == 0 {
                            format!("{s:<w$}", w = widths[c])
                        } else {
                            format!("{s:>w$}", w = widths[c])
                        }
                    })
                    .collect();
                writeln!(out, "{}", line.join("  ").trim_end()).unwrap();
            }
            if rows.iter().any(|(_, r)| r.standard_errors.is_some()) {
                out.push_str("± = bootstrap SE\n");
            }
            out.into_bytes()
        }
    }
}
