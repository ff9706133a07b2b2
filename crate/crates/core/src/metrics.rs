//! Performance, calibration, and group-fairness metrics.
//!
//! Undefined metrics are left out of a report rather than stored as zero;
//! the reason is recorded in the report metadata.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::argmax;

pub const DEFAULT_BINS: usize = 15;
const ROW_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("at least two classes are required")]
    TooFewClasses,
    #[error("probability row {row} is not a distribution (sum {sum})")]
    InvalidProbability { row: usize, sum: f64 },
    #[error("label {label} is outside 0..{n_classes}")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("n_bins must be at least 1")]
    InvalidBins,
    #[error("fairness needs at least two groups")]
    SingleGroup,
    #[error("positive class {0} never occurs in the labels")]
    NoPositiveClassInData(usize),
    #[error("empty prediction set")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    proba: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl Prediction {
    /// Validates rows (non-negative, summing to 1) and derives argmax labels,
    /// ties going to the lowest class.
    pub fn from_proba(proba: Vec<Vec<f64>>) -> Result<Self, MetricsError> {
        let k = proba.first().map_or(0, Vec::len);
        for (row, p) in proba.iter().enumerate() {
            let sum: f64 = p.iter().sum();
            if p.len() != k || p.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(MetricsError::InvalidProbability { row, sum });
            }
        }
        let labels = proba.iter().map(|p| argmax(p)).collect();
        Ok(Self { proba, labels })
    }

    pub fn proba(&self) -> &[Vec<f64>] {
        &self.proba
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.proba.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub values: BTreeMap<String, f64>,
    pub metadata: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }

    /// Stores `value` only when finite.
    pub fn insert(&mut self, key: &str, value: f64) {
        if value.is_finite() {
            self.values.insert(key.to_string(), value);
        } else {
            self.metadata.insert(format!("undefined.{key}"), "non-finite".into());
        }
    }

    pub fn mark_undefined(&mut self, key: &str, reason: &str) {
        self.metadata.insert(format!("undefined.{key}"), reason.into());
    }

    pub fn merge(&mut self, other: MetricsReport) {
        self.values.extend(other.values);
        self.metadata.extend(other.metadata);
    }

    /// Aligned `key  value` lines, values first, then metadata.
    pub fn to_table(&self) -> String {
        let width = self.values.keys().chain(self.metadata.keys()).map(String::len).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k:<width$}  {v:.6}\n"));
        }
        for (k, v) in &self.metadata {
            out.push_str(&format!("{k:<width$}  {v}\n"));
        }
        out
    }
}

fn check_lengths(pred: &Prediction, y: &[usize]) -> Result<usize, MetricsError> {
    if pred.len() != y.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), y.len()));
    }
    if y.is_empty() {
        return Err(MetricsError::Empty);
    }
    let k = pred.n_classes();
    if k < 2 {
        return Err(MetricsError::TooFewClasses);
    }
    if let Some(&label) = y.iter().find(|&&l| l >= k) {
        return Err(MetricsError::LabelOutOfRange { label, n_classes: k });
    }
    Ok(k)
}

/// Mann-Whitney AUC with midranks for tied scores; `None` when either side
/// is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid * order[i..=j].iter().filter(|&&r| positive[r]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Accuracy, support-weighted precision/recall/F1, and AUC.
pub fn evaluate(pred: &Prediction, y: &[usize]) -> Result<MetricsReport, MetricsError> {
    let k = check_lengths(pred, y)?;
    let n = y.len() as f64;
    let labels = pred.labels();
    let mut report = MetricsReport::default();
    report.insert("accuracy", labels.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / n);

    let (mut precision, mut recall, mut f1) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let tp = labels.iter().zip(y).filter(|&(&p, &t)| p == c && t == c).count() as f64;
        let predicted = labels.iter().filter(|&&p| p == c).count() as f64;
        let support = y.iter().filter(|&&t| t == c).count() as f64;
        let p_c = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let r_c = if support > 0.0 { tp / support } else { 0.0 };
        let f_c = if p_c + r_c > 0.0 { 2.0 * p_c * r_c / (p_c + r_c) } else { 0.0 };
        let w = support / n;
        precision += w * p_c;
        recall += w * r_c;
        f1 += w * f_c;
    }
    report.insert("precision", precision);
    report.insert("recall", recall);
    report.insert("f1_score", f1);

    let auc = if k == 2 {
        let scores: Vec<f64> = pred.proba().iter().map(|p| p[1]).collect();
        let pos: Vec<bool> = y.iter().map(|&t| t == 1).collect();
        binary_auc(&scores, &pos)
    } else {
        let (mut total, mut weight) = (0.0, 0.0);
        for c in 0..k {
            let scores: Vec<f64> = pred.proba().iter().map(|p| p[c]).collect();
            let pos: Vec<bool> = y.iter().map(|&t| t == c).collect();
            if let Some(a) = binary_auc(&scores, &pos) {
                let support = pos.iter().filter(|&&p| p).count() as f64;
                total += support * a;
                weight += support;
            }
        }
        (weight > 0.0).then(|| total / weight)
    };
    match auc {
        Some(a) => report.insert("roc_auc_score", a),
        None => report.mark_undefined("roc_auc_score", "only one class present in labels"),
    }
    report.metadata.insert("n_classes".into(), k.to_string());
    Ok(report)
}

/// 1-based bin of `confidence` among `n_bins` left-open equal-width bins;
/// zero falls in bin 1. Edges are compared exactly.
pub fn calibration_bin(confidence: f64, n_bins: usize) -> usize {
    let n = n_bins as f64;
    let mut b = ((confidence * n).ceil() as usize).clamp(1, n_bins);
    while b > 1 && confidence <= (b - 1) as f64 / n {
        b -= 1;
    }
    while b < n_bins && confidence > b as f64 / n {
        b += 1;
    }
    b
}

/// ECE, MCE over non-empty bins, and the Brier score.
pub fn evaluate_calibration(pred: &Prediction, y: &[usize], n_bins: usize) -> Result<MetricsReport, MetricsError> {
    let k = check_lengths(pred, y)?;
    if n_bins == 0 {
        return Err(MetricsError::InvalidBins);
    }
    let n = y.len() as f64;
    // per bin: (count, correct, confidence sum)
    let mut bins = vec![(0usize, 0usize, 0.0f64); n_bins];
    for ((p, &label), &t) in pred.proba().iter().zip(pred.labels()).zip(y) {
        let conf = p[label];
        let b = &mut bins[calibration_bin(conf, n_bins) - 1];
        b.0 += 1;
        b.1 += usize::from(label == t);
        b.2 += conf;
    }
    let (mut ece, mut mce) = (0.0f64, 0.0f64);
    for &(count, correct, conf_sum) in bins.iter().filter(|b| b.0 > 0) {
        let c = count as f64;
        let gap = (correct as f64 / c - conf_sum / c).abs();
        ece += c / n * gap;
        mce = mce.max(gap);
    }
    let brier = if k == 2 {
        pred.proba().iter().zip(y).map(|(p, &t)| (p[1] - f64::from(u8::from(t == 1))).powi(2)).sum::<f64>() / n
    } else {
        pred.proba()
            .iter()
            .zip(y)
            .map(|(p, &t)| p.iter().enumerate().map(|(c, v)| (v - f64::from(u8::from(c == t))).powi(2)).sum::<f64>())
            .sum::<f64>()
            / n
    };
    let mut report = MetricsReport::default();
    report.insert("expected_calibration_error", ece);
    report.insert("maximum_calibration_error", mce);
    report.insert("brier_score_loss", brier);
    report.metadata.insert("n_bins".into(), n_bins.to_string());
    Ok(report)
}

fn max_pairwise_gap(rates: &[f64]) -> f64 {
    let mut gap = 0.0f64;
    for (i, a) in rates.iter().enumerate() {
        for b in &rates[i + 1..] {
            gap = gap.max((a - b).abs());
        }
    }
    gap
}

/// Statistical parity, equalized odds, and equal opportunity differences,
/// each the largest gap over all group pairs.
pub fn evaluate_fairness<G: Ord + Clone>(
    pred: &Prediction,
    y: &[usize],
    groups: &[G],
    positive_class: usize,
) -> Result<MetricsReport, MetricsError> {
    let k = check_lengths(pred, y)?;
    if groups.len() != y.len() {
        return Err(MetricsError::LengthMismatch(groups.len(), y.len()));
    }
    if positive_class >= k {
        return Err(MetricsError::LabelOutOfRange { label: positive_class, n_classes: k });
    }
    let distinct: BTreeSet<&G> = groups.iter().collect();
    if distinct.len() < 2 {
        return Err(MetricsError::SingleGroup);
    }
    if !y.contains(&positive_class) {
        return Err(MetricsError::NoPositiveClassInData(positive_class));
    }
    let (mut ppr, mut tpr, mut fpr) = (Vec::new(), Vec::new(), Vec::new());
    let (mut tpr_defined, mut fpr_defined) = (true, true);
    for g in &distinct {
        let rows: Vec<usize> = (0..y.len()).filter(|&i| &&groups[i] == g).collect();
        let predicted_pos = |i: &&usize| pred.labels()[**i] == positive_class;
        ppr.push(rows.iter().filter(predicted_pos).count() as f64 / rows.len() as f64);
        let pos: Vec<usize> = rows.iter().copied().filter(|&i| y[i] == positive_class).collect();
        let neg: Vec<usize> = rows.iter().copied().filter(|&i| y[i] != positive_class).collect();
        if pos.is_empty() {
            tpr_defined = false;
        } else {
            tpr.push(pos.iter().filter(predicted_pos).count() as f64 / pos.len() as f64);
        }
        if neg.is_empty() {
            fpr_defined = false;
        } else {
            fpr.push(neg.iter().filter(predicted_pos).count() as f64 / neg.len() as f64);
        }
    }
    let mut report = MetricsReport::default();
    report.insert("statistical_parity_difference", max_pairwise_gap(&ppr));
    if tpr_defined {
        report.insert("equalized_opportunity_difference", max_pairwise_gap(&tpr));
    } else {
        report.mark_undefined("equalized_opportunity_difference", "a group has no actual positives");
    }
    if tpr_defined && fpr_defined {
        report.insert("equalized_odds_difference", max_pairwise_gap(&tpr).max(max_pairwise_gap(&fpr)));
    } else {
        let reason = if tpr_defined { "a group has no actual negatives" } else { "a group has no actual positives" };
        report.mark_undefined("equalized_odds_difference", reason);
    }
    report.metadata.insert("positive_class".into(), positive_class.to_string());
    report.metadata.insert("n_groups".into(), distinct.len().to_string());
    Ok(report)
}
