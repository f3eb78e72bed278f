//! Scoring a stored run against annotations, and comparing two runs.
//!
//! Reports carry no timestamps, so evaluating the same run twice gives
//! byte-identical output.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use cystscribe_core::evalstats::{
    accuracy_table, adjust_family, match_matrix, permutation_test_f1, permutation_test_paired, prf_by_category,
    wilcoxon_signed_rank, Alternative, Bootstrap, CategoryPrf, FeatureAccuracyTable, MatchRow, Permutation, StatsError,
    TestResult,
};
use cystscribe_core::risk::{categorize, RiskCategory};
use cystscribe_core::schema::FieldComparisonPolicy;
use cystscribe_core::{FeatureKey, PclFeatureRecord};
use serde::{Deserialize, Serialize};

use crate::corpus::Annotation;
use crate::run::FailureRow;
use crate::stages::{CategoryRow, RecordRow};
use crate::store::{RunManifest, RunStore};
use crate::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub policy: FieldComparisonPolicy,
    /// Intervals are skipped when absent.
    pub bootstrap: Option<Bootstrap>,
    pub alpha: f64,
    pub permutation: Permutation,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            policy: FieldComparisonPolicy::default(),
            bootstrap: Some(Bootstrap::default()),
            alpha: 0.05,
            permutation: Permutation::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub options: EvalOptions,
    /// Reports present in both the run and the annotations.
    pub cases: usize,
    /// Scored cases with no valid record. They count as wrong on every
    /// feature and are left out of the category metrics.
    pub failed_reports: Vec<String>,
    pub run_only: Vec<String>,
    pub annotation_only: Vec<String>,
    pub accuracy: FeatureAccuracyTable,
    /// Report ids that missed, per feature.
    pub mismatches: BTreeMap<FeatureKey, Vec<String>>,
    pub categories: Option<CategoryPrf<RiskCategory>>,
    pub category_cases: usize,
}

/// A run's records and categories after digest checks.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub manifest: RunManifest,
    pub records: Vec<RecordRow>,
    pub categories: Vec<CategoryRow>,
    pub failures: Vec<FailureRow>,
}

pub fn load_run(store: &RunStore) -> Result<LoadedRun, PipelineError> {
    let manifest = store.load_manifest()?;
    store.verify(&manifest)?;
    Ok(LoadedRun {
        records: store.read_artifact(&manifest, "records")?,
        categories: store.read_artifact(&manifest, "categories")?,
        failures: store.read_artifact(&manifest, "failures")?,
        manifest,
    })
}

/// The annotated category, or the one the rules give for the true record.
pub fn truth_category(annotation: &Annotation) -> RiskCategory {
    annotation
        .risk_category
        .unwrap_or_else(|| categorize(&annotation.record).category)
}

struct Scored<'a> {
    ids: Vec<&'a str>,
    predictions: Vec<Option<&'a PclFeatureRecord>>,
    truths: Vec<PclFeatureRecord>,
    annotations: Vec<&'a Annotation>,
    run_only: Vec<String>,
    annotation_only: Vec<String>,
}

fn align<'a>(run: &'a LoadedRun, annotations: &'a [Annotation]) -> Result<Scored<'a>, PipelineError> {
    let truth: HashMap<&str, &Annotation> = annotations.iter().map(|a| (a.report_id.as_str(), a)).collect();
    let run_ids: BTreeSet<&str> = run.records.iter().map(|r| r.report_id.as_str()).collect();
    let mut scored = Scored {
        ids: Vec::new(),
        predictions: Vec::new(),
        truths: Vec::new(),
        annotations: Vec::new(),
        run_only: Vec::new(),
        annotation_only: annotations
            .iter()
            .filter(|a| !run_ids.contains(a.report_id.as_str()))
            .map(|a| a.report_id.clone())
            .collect(),
    };
    for row in &run.records {
        match truth.get(row.report_id.as_str()) {
            Some(annotation) => {
                scored.ids.push(&row.report_id);
                scored.predictions.push(row.record.as_ref());
                scored.truths.push(annotation.record.clone());
                scored.annotations.push(annotation);
            }
            None => scored.run_only.push(row.report_id.clone()),
        }
    }
    if scored.ids.is_empty() {
        return Err(PipelineError::NoOverlap {
            run_only: scored.run_only.len(),
            annotation_only: scored.annotation_only.len(),
        });
    }
    Ok(scored)
}

fn stats(e: StatsError) -> PipelineError {
    PipelineError::Eval(e.to_string())
}

pub fn evaluate_run(
    run: &LoadedRun,
    annotations: &[Annotation],
    options: &EvalOptions,
) -> Result<EvalReport, PipelineError> {
    options
        .policy
        .validate()
        .map_err(|e| PipelineError::Eval(e.to_string()))?;
    let scored = align(run, annotations)?;
    if !scored.run_only.is_empty() || !scored.annotation_only.is_empty() {
        tracing::warn!(
            run_only = scored.run_only.len(),
            annotation_only = scored.annotation_only.len(),
            "scoring the reports present in both run and annotations"
        );
    }
    let rows = match_matrix(&scored.predictions, &scored.truths, &options.policy).map_err(stats)?;
    let accuracy = accuracy_table(&rows, options.bootstrap.as_ref()).map_err(stats)?;
    let mismatches = FeatureKey::ALL
        .into_iter()
        .enumerate()
        .map(|(f, key)| {
            let ids = rows
                .iter()
                .zip(&scored.ids)
                .filter(|(row, _)| !row[f])
                .map(|(_, id)| id.to_string())
                .collect();
            (key, ids)
        })
        .collect();

    let predicted: HashMap<&str, RiskCategory> = run
        .categories
        .iter()
        .map(|c| (c.report_id.as_str(), c.assessment.category))
        .collect();
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    let mut failed_reports = Vec::new();
    for (id, annotation) in scored.ids.iter().zip(&scored.annotations) {
        match predicted.get(id) {
            Some(&p) => {
                pred.push(p);
                truth.push(truth_category(annotation));
            }
            None => failed_reports.push(id.to_string()),
        }
    }
    let categories = if truth.is_empty() {
        None
    } else {
        let labels: BTreeSet<&str> = truth.iter().map(|c| c.as_str()).collect();
        tracing::info!(?labels, "macro averages over categories present in the annotations");
        Some(prf_by_category(&pred, &truth, options.bootstrap.as_ref()).map_err(stats)?)
    };

    Ok(EvalReport {
        run_id: run.manifest.run_id.clone(),
        options: options.clone(),
        cases: scored.ids.len(),
        failed_reports,
        run_only: scored.run_only,
        annotation_only: scored.annotation_only,
        accuracy,
        mismatches,
        categories,
        category_cases: truth.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTest {
    pub name: String,
    pub result: Option<TestResult>,
    /// Why the test could not be run.
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub run_a: String,
    pub run_b: String,
    pub cases: usize,
    pub category_cases: usize,
    pub average_accuracy_a: f64,
    pub average_accuracy_b: f64,
    pub alpha: f64,
    /// Holm-adjusted as one family over the tests that ran.
    pub tests: Vec<NamedTest>,
}

/// Compares two runs on the reports both scored. Feature accuracies are
/// compared with a signed-rank test, per-field correctness with a paired
/// permutation test and category macro-F1 with a swap permutation test.
pub fn compare_runs(
    a: &LoadedRun,
    b: &LoadedRun,
    annotations: &[Annotation],
    options: &EvalOptions,
) -> Result<ComparisonReport, PipelineError> {
    let sa = align(a, annotations)?;
    let sb = align(b, annotations)?;
    let b_index: HashMap<&str, usize> = sb.ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let pairs: Vec<(usize, usize)> = sa
        .ids
        .iter()
        .enumerate()
        .filter_map(|(i, id)| b_index.get(id).map(|&j| (i, j)))
        .collect();
    if pairs.is_empty() {
        return Err(PipelineError::Eval("the runs share no annotated reports".into()));
    }
    let truths: Vec<PclFeatureRecord> = pairs.iter().map(|&(i, _)| sa.truths[i].clone()).collect();
    let rows = |s: &Scored, pick: &dyn Fn(&(usize, usize)) -> usize| -> Result<Vec<MatchRow>, PipelineError> {
        let preds: Vec<Option<&PclFeatureRecord>> = pairs.iter().map(|p| s.predictions[pick(p)]).collect();
        match_matrix(&preds, &truths, &options.policy).map_err(stats)
    };
    let rows_a = rows(&sa, &|p| p.0)?;
    let rows_b = rows(&sb, &|p| p.1)?;
    let table_a = accuracy_table(&rows_a, None).map_err(stats)?;
    let table_b = accuracy_table(&rows_b, None).map_err(stats)?;
    let acc = |t: &FeatureAccuracyTable| t.features.iter().map(|f| f.accuracy).collect::<Vec<_>>();

    let mut tests = vec![
        named(
            "wilcoxon_feature_accuracy",
            wilcoxon_signed_rank(&acc(&table_a), &acc(&table_b), Alternative::TwoSided),
        ),
        named(
            "permutation_field_correctness",
            permutation_test_paired(
                &rows_a.iter().flatten().copied().collect::<Vec<_>>(),
                &rows_b.iter().flatten().copied().collect::<Vec<_>>(),
                Alternative::TwoSided,
                &options.permutation,
            ),
        ),
    ];

    let cat = |run: &LoadedRun| -> HashMap<String, RiskCategory> {
        run.categories
            .iter()
            .map(|c| (c.report_id.clone(), c.assessment.category))
            .collect()
    };
    let (cat_a, cat_b) = (cat(a), cat(b));
    let mut pred_a = Vec::new();
    let mut pred_b = Vec::new();
    let mut truth = Vec::new();
    for &(i, _) in &pairs {
        let id = sa.ids[i];
        if let (Some(&x), Some(&y)) = (cat_a.get(id), cat_b.get(id)) {
            pred_a.push(x);
            pred_b.push(y);
            truth.push(truth_category(sa.annotations[i]));
        }
    }
    tests.push(named(
        "permutation_category_macro_f1",
        permutation_test_f1(&pred_a, &pred_b, &truth, &options.permutation),
    ));

    let mut ran: Vec<TestResult> = tests.iter().filter_map(|t| t.result.clone()).collect();
    if !ran.is_empty() {
        adjust_family(&mut ran, options.alpha).map_err(stats)?;
        let mut adjusted = ran.into_iter();
        for test in tests.iter_mut().filter(|t| t.result.is_some()) {
            test.result = adjusted.next();
        }
    }

    Ok(ComparisonReport {
        run_a: a.manifest.run_id.clone(),
        run_b: b.manifest.run_id.clone(),
        cases: pairs.len(),
        category_cases: truth.len(),
        average_accuracy_a: table_a.average_accuracy,
        average_accuracy_b: table_b.average_accuracy,
        alpha: options.alpha,
        tests,
    })
}

fn named(name: &str, outcome: Result<TestResult, StatsError>) -> NamedTest {
    match outcome {
        Ok(result) => NamedTest {
            name: name.to_string(),
            result: Some(result),
            skipped: None,
        },
        Err(e) => NamedTest {
            name: name.to_string(),
            result: None,
            skipped: Some(e.to_string()),
        },
    }
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn ci(interval: Option<cystscribe_core::evalstats::Interval>) -> String {
    interval.map_or(String::new(), |i| format!("[{}, {}]", pct(i.low), pct(i.high)))
}

/// Plain-text summary: per-feature accuracy, then per-category metrics.
pub fn render_text(report: &EvalReport) -> String {
    let mut out = format!(
        "run {}: {} cases, {} failed extractions\n\n",
        report.run_id,
        report.cases,
        report.failed_reports.len()
    );
    out.push_str(&format!(
        "{:<34} {:>9} {:>8}  {}\n",
        "feature", "matches", "acc %", "95% CI"
    ));
    for f in &report.accuracy.features {
        out.push_str(&format!(
            "{:<34} {:>4}/{:<4} {:>8}  {}\n",
            f.display_name,
            f.matches,
            f.total,
            pct(f.accuracy),
            ci(f.ci)
        ));
    }
    out.push_str(&format!(
        "{:<34} {:>9} {:>8}  {}\n",
        "average",
        "",
        pct(report.accuracy.average_accuracy),
        ci(report.accuracy.average_ci)
    ));
    if let Some(prf) = &report.categories {
        out.push_str(&format!(
            "\nrisk categories ({} cases)\n{:<26} {:>7} {:>7} {:>7} {:>7}\n",
            report.category_cases, "category", "P %", "R %", "F1 %", "support"
        ));
        for c in &prf.per_category {
            out.push_str(&format!(
                "{:<26} {:>7} {:>7} {:>7} {:>7}\n",
                c.label.as_str(),
                pct(c.precision),
                pct(c.recall),
                pct(c.f1),
                c.support
            ));
        }
        out.push_str(&format!(
            "{:<26} {:>7} {:>7} {:>7}\n",
            "macro",
            pct(prf.macro_precision),
            pct(prf.macro_recall),
            pct(prf.macro_f1)
        ));
    }
    out
}

fn bound(interval: Option<cystscribe_core::evalstats::Interval>, low: bool) -> String {
    interval.map_or(String::new(), |i| (if low { i.low } else { i.high }).to_string())
}

pub fn accuracy_csv(report: &EvalReport) -> String {
    let mut out = String::from("feature,matches,total,accuracy,ci_low,ci_high\n");
    for f in &report.accuracy.features {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            f.key.as_str(),
            f.matches,
            f.total,
            f.accuracy,
            bound(f.ci, true),
            bound(f.ci, false)
        ));
    }
    out.push_str(&format!(
        "average,,,{},{},{}\n",
        report.accuracy.average_accuracy,
        bound(report.accuracy.average_ci, true),
        bound(report.accuracy.average_ci, false)
    ));
    out
}

pub fn categories_csv(report: &EvalReport) -> String {
    let mut out = String::from("category,precision,recall,f1,support,predicted\n");
    if let Some(prf) = &report.categories {
        for c in &prf.per_category {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.label.as_str(),
                c.precision,
                c.recall,
                c.f1,
                c.support,
                c.predicted
            ));
        }
        out.push_str(&format!(
            "macro,{},{},{},,\n",
            prf.macro_precision, prf.macro_recall, prf.macro_f1
        ));
    }
    out
}
