use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Bootstrap, Interval, StatsError};
use crate::schema::{record_field_equal, FeatureKey, FieldComparisonPolicy, PclFeatureRecord, FEATURE_COUNT};

/// Per-case, per-feature match flags in [`FeatureKey::ALL`] order.
pub type MatchRow = [bool; FEATURE_COUNT];

/// Match flags for each case. A missing prediction (failed extraction)
/// counts as wrong on every feature.
pub fn match_matrix(
    predictions: &[Option<&PclFeatureRecord>],
    truths: &[PclFeatureRecord],
    policy: &FieldComparisonPolicy,
) -> Result<Vec<MatchRow>, StatsError> {
    if predictions.len() != truths.len() {
        return Err(StatsError::LengthMismatch {
            left: predictions.len(),
            right: truths.len(),
        });
    }
    Ok(predictions
        .iter()
        .zip(truths)
        .map(|(pred, truth)| {
            let mut row = [false; FEATURE_COUNT];
            if let Some(pred) = pred {
                for (slot, key) in row.iter_mut().zip(FeatureKey::ALL) {
                    *slot = record_field_equal(key, pred, truth, policy);
                }
            }
            row
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureAccuracy {
    pub key: FeatureKey,
    pub display_name: String,
    pub matches: usize,
    pub total: usize,
    pub accuracy: f64,
    pub ci: Option<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureAccuracyTable {
    pub features: Vec<FeatureAccuracy>,
    /// Unweighted mean of the per-feature accuracies.
    pub average_accuracy: f64,
    pub average_ci: Option<Interval>,
}

impl FeatureAccuracyTable {
    pub fn get(&self, key: FeatureKey) -> &FeatureAccuracy {
        &self.features[FeatureKey::ALL.iter().position(|k| *k == key).unwrap_or(0)]
    }
}

fn row_accuracies(rows: &[MatchRow], idx: impl Iterator<Item = usize> + Clone) -> Vec<f64> {
    let n = idx.clone().count() as f64;
    let mut out: Vec<f64> = (0..FEATURE_COUNT)
        .map(|f| idx.clone().filter(|&i| rows[i][f]).count() as f64 / n)
        .collect();
    out.push(out.iter().sum::<f64>() / FEATURE_COUNT as f64);
    out
}

/// Accuracy table from a match matrix. Intervals are computed when a
/// bootstrap is given; every feature uses the same resampled cases.
pub fn accuracy_table(rows: &[MatchRow], bootstrap: Option<&Bootstrap>) -> Result<FeatureAccuracyTable, StatsError> {
    if rows.is_empty() {
        return Err(StatsError::Empty);
    }
    let point = row_accuracies(rows, 0..rows.len());
    let cis = match bootstrap {
        Some(b) => b.intervals(rows.len(), FEATURE_COUNT + 1, |idx| {
            row_accuracies(rows, idx.iter().copied())
        })?,
        None => vec![None; FEATURE_COUNT + 1],
    };
    let features = FeatureKey::ALL
        .into_iter()
        .enumerate()
        .map(|(f, key)| FeatureAccuracy {
            key,
            display_name: key.display_name().to_owned(),
            matches: rows.iter().filter(|r| r[f]).count(),
            total: rows.len(),
            accuracy: point[f],
            ci: cis[f],
        })
        .collect();
    Ok(FeatureAccuracyTable {
        features,
        average_accuracy: point[FEATURE_COUNT],
        average_ci: cis[FEATURE_COUNT],
    })
}

pub fn exact_match_table(
    predictions: &[PclFeatureRecord],
    truths: &[PclFeatureRecord],
    policy: &FieldComparisonPolicy,
    bootstrap: Option<&Bootstrap>,
) -> Result<FeatureAccuracyTable, StatsError> {
    let preds: Vec<Option<&PclFeatureRecord>> = predictions.iter().map(Some).collect();
    accuracy_table(&match_matrix(&preds, truths, policy)?, bootstrap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics<L> {
    pub label: L,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of true cases of this label.
    pub support: usize,
    pub predicted: usize,
    /// No case was predicted as this label; precision was scored 0.
    pub precision_undefined: bool,
    pub precision_ci: Option<Interval>,
    pub recall_ci: Option<Interval>,
    pub f1_ci: Option<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryPrf<L> {
    pub per_category: Vec<ClassMetrics<L>>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub macro_precision_ci: Option<Interval>,
    pub macro_recall_ci: Option<Interval>,
    pub macro_f1_ci: Option<Interval>,
}

impl<L: PartialEq> CategoryPrf<L> {
    pub fn get(&self, label: &L) -> Option<&ClassMetrics<L>> {
        self.per_category.iter().find(|c| &c.label == label)
    }
}

/// One-vs-rest counts over a subset of cases: (tp, predicted, support) per label.
fn counts<L: Ord>(
    labels: &[L],
    pred: &[L],
    truth: &[L],
    idx: impl Iterator<Item = usize>,
) -> Vec<(usize, usize, usize)> {
    let mut out = vec![(0, 0, 0); labels.len()];
    for i in idx {
        let p = labels.binary_search(&pred[i]);
        let t = labels.binary_search(&truth[i]);
        if let Ok(p) = p {
            out[p].1 += 1;
            if t == Ok(p) {
                out[p].0 += 1;
            }
        }
        if let Ok(t) = t {
            out[t].2 += 1;
        }
    }
    out
}

/// (precision, recall, f1, precision_undefined); recall is NaN without support.
fn prf(tp: usize, predicted: usize, support: usize) -> (f64, f64, f64, bool) {
    let undefined = predicted == 0;
    let precision = if undefined { 0.0 } else { tp as f64 / predicted as f64 };
    let recall = if support == 0 {
        f64::NAN
    } else {
        tp as f64 / support as f64
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else if support == 0 {
        f64::NAN
    } else {
        0.0
    };
    (precision, recall, f1, undefined)
}

/// Macro P/R/F1 over the labels with support among `idx`; per-label values
/// are NaN for labels without support.
fn macro_values<L: Ord>(labels: &[L], pred: &[L], truth: &[L], idx: impl Iterator<Item = usize>) -> Vec<f64> {
    let c = counts(labels, pred, truth, idx);
    let mut out = Vec::with_capacity(3 * labels.len() + 3);
    let mut sums = [0.0; 3];
    let mut included = 0usize;
    for &(tp, predicted, support) in &c {
        let (p, r, f, _) = prf(tp, predicted, support);
        if support > 0 {
            out.extend([p, r, f]);
            sums[0] += p;
            sums[1] += r;
            sums[2] += f;
            included += 1;
        } else {
            out.extend([f64::NAN; 3]);
        }
    }
    out.extend(sums.map(|s| if included == 0 { f64::NAN } else { s / included as f64 }));
    out
}

/// Macro-averaged F1 over the labels present in `truth`.
pub fn macro_f1<L: Ord + Clone>(pred: &[L], truth: &[L]) -> Result<f64, StatsError> {
    Ok(prf_by_category(pred, truth, None)?.macro_f1)
}

/// One-vs-rest precision, recall and F1 for every label present in `truth`,
/// with macro averages over those labels.
pub fn prf_by_category<L: Ord + Clone>(
    pred: &[L],
    truth: &[L],
    bootstrap: Option<&Bootstrap>,
) -> Result<CategoryPrf<L>, StatsError> {
    if pred.len() != truth.len() {
        return Err(StatsError::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    if truth.is_empty() {
        return Err(StatsError::Empty);
    }
    let labels: Vec<L> = truth.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let k = labels.len();
    let cis = match bootstrap {
        Some(b) => b.intervals(truth.len(), 3 * k + 3, |idx| {
            macro_values(&labels, pred, truth, idx.iter().copied())
        })?,
        None => vec![None; 3 * k + 3],
    };
    let per_category = counts(&labels, pred, truth, 0..truth.len())
        .into_iter()
        .zip(&labels)
        .enumerate()
        .map(|(j, ((tp, predicted, support), label))| {
            let (precision, recall, f1, precision_undefined) = prf(tp, predicted, support);
            ClassMetrics {
                label: label.clone(),
                precision,
                recall,
                f1,
                support,
                predicted,
                precision_undefined,
                precision_ci: cis[3 * j],
                recall_ci: cis[3 * j + 1],
                f1_ci: cis[3 * j + 2],
            }
        })
        .collect::<Vec<_>>();
    let mean = |f: fn(&ClassMetrics<L>) -> f64| per_category.iter().map(f).sum::<f64>() / k as f64;
    Ok(CategoryPrf {
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        macro_precision_ci: cis[3 * k],
        macro_recall_ci: cis[3 * k + 1],
        macro_f1_ci: cis[3 * k + 2],
        per_category,
    })
}
