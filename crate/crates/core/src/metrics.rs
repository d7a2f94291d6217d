//! Binary classification metrics. Label 1 (parasitized) is the positive class.
//!
//! Rates whose denominator is zero are reported as `None` rather than being
//! coerced to 0 or 1.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Empty("no scores to evaluate".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidArgument(format!("label {l} is not binary")));
    }
    Ok(())
}

/// Tally predictions `score ≥ threshold` against labels.
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionMatrix> {
    check_inputs(scores, labels)?;
    let mut cm = ConfusionMatrix::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => cm.tp += 1,
            (false, false) => cm.tn += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasicRates {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Accuracy `(TP+TN)/total`, sensitivity `TP/(TP+FN)`, specificity `TN/(TN+FP)`.
pub fn basic_rates(cm: &ConfusionMatrix) -> BasicRates {
    BasicRates {
        accuracy: ratio(cm.tp + cm.tn, cm.total()),
        sensitivity: ratio(cm.tp, cm.tp + cm.fn_),
        specificity: ratio(cm.tn, cm.tn + cm.fp),
    }
}

/// Cohen's kappa between predictions and labels.
pub fn kappa(cm: &ConfusionMatrix) -> Option<f64> {
    let n = cm.total() as f64;
    if n == 0.0 {
        return None;
    }
    let (tp, tn, fp, fn_) = (cm.tp as f64, cm.tn as f64, cm.fp as f64, cm.fn_ as f64);
    let po = (tp + tn) / n;
    let pe = ((tp + fp) * (tp + fn_) + (tn + fn_) * (tn + fp)) / (n * n);
    if pe >= 1.0 {
        return None;
    }
    Some((po - pe) / (1.0 - pe))
}

/// Area under the ROC curve via the Mann–Whitney rank statistic, ties
/// counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument("AUC needs both classes present".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of midranks of the positives
    let mut pos_rank_sum = 0.0f64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        pos_rank_sum += idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64 * midrank;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub kappa: Option<f64>,
    pub auc: Option<f64>,
    pub threshold: f64,
    pub samples: u64,
    pub confusion: ConfusionMatrix,
}

pub const TABLE_COLUMNS: [&str; 5] = ["Accuracy (%)", "Sensitivity (%)", "Specificity (%)", "Kappa Score (%)", "AUC Score (%)"];

impl MetricsReport {
    pub fn from_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        let cm = confusion(scores, labels, threshold)?;
        let rates = basic_rates(&cm);
        let both_classes = labels.contains(&0) && labels.contains(&1);
        Ok(Self {
            accuracy: rates.accuracy,
            sensitivity: rates.sensitivity,
            specificity: rates.specificity,
            kappa: kappa(&cm),
            auc: if both_classes { Some(auc(scores, labels)?) } else { None },
            threshold,
            samples: cm.total(),
            confusion: cm,
        })
    }

    /// Values in table column order.
    pub fn values(&self) -> [Option<f64>; 5] {
        [self.accuracy, self.sensitivity, self.specificity, self.kappa, self.auc]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Percentages to one decimal, `-` for undefined values.
    pub fn percent_cells(&self) -> Vec<String> {
        self.values()
            .iter()
            .map(|v| match v {
                Some(x) => format!("{:.1}", 100.0 * x),
                None => "-".into(),
            })
            .collect()
    }

    /// `| label | acc | sens | spec | kappa | auc |`
    pub fn table_row(&self, label: &str) -> String {
        let mut s = format!("| {label} |");
        for c in self.percent_cells() {
            write!(s, " {c} |").unwrap();
        }
        s
    }
}

pub fn table_header(first: &str) -> String {
    format!("| {first} | {} |", TABLE_COLUMNS.join(" | "))
}
