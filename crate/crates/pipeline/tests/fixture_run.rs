use std::collections::BTreeMap;

use cystscribe_core::grounding::GroundingSummary;
use cystscribe_core::risk::categorize;
use cystscribe_gateway::stub::StubServer;
use cystscribe_gateway::{DecodingProfile, EndpointConfig, ExchangeLog, PromptMode};
use cystscribe_pipeline::evaluate::{evaluate_run, load_run, EvalOptions};
use cystscribe_pipeline::fixtures;
use cystscribe_pipeline::run::{run_extraction, FailureRow, RunSettings};
use cystscribe_pipeline::stages::{AuditRow, CategoryRow, RecordRow, RecordStatus};
use cystscribe_pipeline::{RunManifest, RunStore};

async fn fixture_run(dir: &std::path::Path) -> (RunStore, RunManifest) {
    let corpus = fixtures::corpus();
    let stub = StubServer::start(fixtures::stub_responder(&corpus, &fixtures::completions()))
        .await
        .unwrap();
    let store = RunStore::create(dir, "fixture").unwrap();
    let settings = RunSettings::new(PromptMode::Cot, DecodingProfile::gpt_cot());
    let manifest = run_extraction(
        &corpus,
        &settings,
        EndpointConfig::new(&stub.base_url(), "stub-model"),
        &store,
    )
    .await
    .unwrap();
    stub.shutdown().await;
    (store, manifest)
}

#[tokio::test]
async fn fixture_run_reproduces_hand_scores() {
    let dir = tempfile::tempdir().unwrap();
    let (store, manifest) = fixture_run(dir.path()).await;
    let expected = fixtures::expected();

    assert_eq!(manifest.counts.reports, expected.cases);
    assert_eq!(manifest.counts.failed, expected.failed_reports.len());
    store.verify(&manifest).unwrap();
    let exchanges = ExchangeLog::read_all(&store.path("exchanges.jsonl")).unwrap();
    assert_eq!(exchanges.len(), expected.cases);
    assert!(exchanges.iter().all(|e| e.status == Some(200) && e.attempt == 1));

    let run = load_run(&store).unwrap();
    let options = EvalOptions {
        bootstrap: None,
        ..EvalOptions::default()
    };
    let report = evaluate_run(&run, &fixtures::annotations(), &options).unwrap();
    assert_eq!(report.cases, expected.cases);
    assert_eq!(report.failed_reports, expected.failed_reports);
    for feature in &report.accuracy.features {
        let key = feature.key.as_str();
        assert_eq!(feature.matches, expected.matches[key], "{key}");
        assert_eq!(report.mismatches[&feature.key], expected.mismatches[key], "{key}");
    }
    let mean = expected.matches.values().sum::<usize>() as f64 / (20 * expected.cases) as f64;
    assert!((report.accuracy.average_accuracy - mean).abs() < 1e-12);
    assert_eq!(report.category_cases, expected.cases - expected.failed_reports.len());

    let failures: Vec<FailureRow> = store.read_artifact(&run.manifest, "failures").unwrap();
    assert_eq!(
        failures.iter().map(|f| f.report_id.as_str()).collect::<Vec<_>>(),
        expected.failed_reports
    );
    let records: Vec<RecordRow> = store.read_artifact(&run.manifest, "records").unwrap();
    let r024 = records.iter().find(|r| r.report_id == "R024").unwrap();
    assert_eq!(r024.status, RecordStatus::Failed);
    assert!(r024.error.as_deref().unwrap().contains("location"));

    let summary: GroundingSummary = store.read_json("grounding_summary.json").unwrap();
    let counts: BTreeMap<String, usize> = summary
        .counts
        .iter()
        .filter(|(_, &n)| n > 0)
        .map(|(c, &n)| (c.as_str().to_string(), n))
        .collect();
    assert_eq!(counts, expected.grounding_counts);
}

#[tokio::test]
async fn audit_flags_the_injected_interval_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (store, manifest) = fixture_run(dir.path()).await;
    let audits: Vec<AuditRow> = store.read_artifact(&manifest, "audit").unwrap();
    let flagged: Vec<(&str, &str)> = audits
        .iter()
        .flat_map(|a| a.findings.iter().map(move |f| (a.report_id.as_str(), f.field.as_str())))
        .filter(|(_, field)| *field == "time_interval_months")
        .collect();
    assert_eq!(
        flagged,
        [("R008", "time_interval_months"), ("R011", "time_interval_months")]
    );
}

#[tokio::test]
async fn evaluation_is_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let (store, _) = fixture_run(dir.path()).await;
    let options = EvalOptions {
        bootstrap: Some(cystscribe_core::evalstats::Bootstrap {
            n_boot: 200,
            level: 0.95,
            seed: 7,
        }),
        ..EvalOptions::default()
    };
    let annotations = fixtures::annotations();
    let once =
        serde_json::to_string(&evaluate_run(&load_run(&store).unwrap(), &annotations, &options).unwrap()).unwrap();
    let twice =
        serde_json::to_string(&evaluate_run(&load_run(&store).unwrap(), &annotations, &options).unwrap()).unwrap();
    assert_eq!(once, twice);
}

#[test]
fn rule_categories_of_the_truth_match_the_annotations() {
    let expected = fixtures::expected();
    let mut histogram: BTreeMap<String, usize> = BTreeMap::new();
    for annotation in fixtures::annotations() {
        let category = categorize(&annotation.record).category;
        assert_eq!(Some(category), annotation.risk_category, "{}", annotation.report_id);
        *histogram.entry(category.as_str().to_string()).or_default() += 1;
    }
    assert_eq!(histogram, expected.risk_categories);
}

#[tokio::test]
async fn predicted_categories_cover_every_successful_report() {
    let dir = tempfile::tempdir().unwrap();
    let (store, manifest) = fixture_run(dir.path()).await;
    let categories: Vec<CategoryRow> = store.read_artifact(&manifest, "categories").unwrap();
    assert_eq!(categories.len(), manifest.counts.succeeded);
    assert!(categories.iter().all(|c| c.report_id != "R024"));
}
