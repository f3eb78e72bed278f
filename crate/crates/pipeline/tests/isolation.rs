use std::sync::Arc;

use cystscribe_core::consensus::aggregate_texts;
use cystscribe_core::schema::canonical_serialize;
use cystscribe_core::FeatureKey;
use cystscribe_core::PclFeatureRecord;
use cystscribe_gateway::stub::{StubReply, StubServer};
use cystscribe_gateway::{DecodingProfile, EndpointConfig, PromptMode};
use cystscribe_pipeline::corpus::{Modality, ReportDocument};
use cystscribe_pipeline::evaluate::{compare_runs, evaluate_run, load_run, EvalOptions};
use cystscribe_pipeline::fixtures;
use cystscribe_pipeline::run::{replay, run_extraction, CompletionRow, FailureRow, FailureStage, RunSettings};
use cystscribe_pipeline::stages::{RecordRow, RecordStatus, TallyRow};
use cystscribe_pipeline::{PipelineError, RunStore};

fn doc(id: &str, text: &str) -> ReportDocument {
    ReportDocument {
        report_id: id.into(),
        patient_id: format!("P-{id}"),
        modality: Modality::Ct,
        report_text: text.into(),
        signature_date: "2022-01-01".parse().unwrap(),
        prior_study_dates: None,
    }
}

fn fast(base_url: &str) -> EndpointConfig {
    let mut config = EndpointConfig::new(base_url, "stub-model");
    config.retry.base_delay_ms = 1;
    config.retry.max_delay_ms = 2;
    config
}

fn record(size: f64) -> String {
    canonical_serialize(&PclFeatureRecord {
        num_cysts_measured: Some(1),
        size_mm: Some(size),
        ..Default::default()
    })
}

#[tokio::test]
async fn one_bad_report_does_not_sink_the_run() {
    let corpus = vec![
        doc("good", "Cyst A report."),
        doc("garbled", "Cyst B report."),
        doc("down", "Cyst C report."),
        doc("invalid", "Cyst D report."),
    ];
    let good = record(12.0);
    let stub = StubServer::start(Arc::new(move |req| match req.user_report() {
        "Cyst A report." => StubReply::Choices(vec![good.clone()]),
        "Cyst B report." => StubReply::Choices(vec!["no json here".into()]),
        "Cyst C report." => StubReply::Status {
            status: 500,
            retry_after: None,
            body: "boom".into(),
        },
        _ => StubReply::Choices(vec![r#"{"size_mm": "large"}"#.into()]),
    }))
    .await
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::create(dir.path(), "mixed").unwrap();
    let settings = RunSettings::new(PromptMode::Standard, DecodingProfile::gpt_standard());
    let manifest = run_extraction(&corpus, &settings, fast(&stub.base_url()), &store)
        .await
        .unwrap();
    assert_eq!((manifest.counts.succeeded, manifest.counts.failed), (1, 3));

    let failures: Vec<FailureRow> = store.read_artifact(&manifest, "failures").unwrap();
    let stages: Vec<(&str, FailureStage)> = failures.iter().map(|f| (f.report_id.as_str(), f.stage)).collect();
    assert_eq!(
        stages,
        [
            ("garbled", FailureStage::Validation),
            ("down", FailureStage::Request),
            ("invalid", FailureStage::Validation),
        ]
    );
    let records: Vec<RecordRow> = store.read_artifact(&manifest, "records").unwrap();
    assert_eq!(records[0].status, RecordStatus::Ok);
    assert!(records[3].error.as_deref().unwrap().contains("size_mm"));
    // Five attempts for the 500, one each for the rest.
    assert_eq!(stub.stats().requests(), 8);
}

#[tokio::test]
async fn invalid_input_is_rejected_before_any_request() {
    let stub = StubServer::fixed("{}").await.unwrap();
    let dir = tempfile::tempdir().unwrap();
    let settings = RunSettings::new(PromptMode::Standard, DecodingProfile::gpt_standard());

    let dup = vec![doc("a", "text"), doc("a", "text")];
    let store = RunStore::create(dir.path(), "dup").unwrap();
    let err = run_extraction(&dup, &settings, fast(&stub.base_url()), &store)
        .await
        .unwrap_err();
    assert!(matches!(err, PipelineError::Corpus(_)));

    let mut bad = settings.clone();
    bad.profile.temperature = -1.0;
    let store = RunStore::create(dir.path(), "temp").unwrap();
    let err = run_extraction(&[doc("a", "t")], &bad, fast(&stub.base_url()), &store)
        .await
        .unwrap_err();
    assert!(matches!(err, PipelineError::Profile(_)));
    assert_eq!(stub.stats().requests(), 0);
}

#[tokio::test]
async fn self_consistency_votes_match_the_consensus_module() {
    let corpus = vec![doc("sc", "Cyst report for voting.")];
    let samples: Vec<String> = (0..40)
        .map(|i| match i % 5 {
            0 | 1 => record(10.0),
            2 => record(11.0),
            3 => record(12.0),
            _ => "truncated {".into(),
        })
        .collect();
    let script = samples.clone();
    let stub = StubServer::start(Arc::new(move |req| {
        let offset = req.request_id.as_deref().map_or(0, |id| id.len()) % script.len();
        StubReply::Choices(script.iter().cycle().skip(offset).take(req.n).cloned().collect())
    }))
    .await
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::create(dir.path(), "sc").unwrap();
    let settings = RunSettings::new(PromptMode::Standard, DecodingProfile::self_consistency());
    let manifest = run_extraction(&corpus, &settings, fast(&stub.base_url()), &store)
        .await
        .unwrap();

    let completions: Vec<CompletionRow> = store.read_artifact(&manifest, "completions").unwrap();
    assert_eq!(completions[0].completions.len(), 40);
    let direct = aggregate_texts(&completions[0].completions).unwrap();
    let records: Vec<RecordRow> = store.read_artifact(&manifest, "records").unwrap();
    assert_eq!(records[0].record.as_ref(), Some(&direct.record));
    assert_eq!(records[0].valid_samples, 40 - direct.dropped);
    let tallies: Vec<TallyRow> = store.read_artifact(&manifest, "tallies").unwrap();
    assert_eq!(tallies[0].tallies, direct.tallies);
    assert_eq!(tallies[0].tallies[&FeatureKey::SizeMm].total, records[0].valid_samples);
}

#[test]
fn tampered_artifacts_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::create(dir.path(), "replayed").unwrap();
    let settings = RunSettings::new(PromptMode::Cot, DecodingProfile::gpt_cot());
    replay(
        &fixtures::corpus(),
        &fixtures::completions(),
        &settings,
        &store,
        "fixture",
    )
    .unwrap();
    assert!(load_run(&store).is_ok());
    let path = store.path("records.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replacen("\"ok\"", "\"failed\"", 1)).unwrap();
    assert!(matches!(load_run(&store), Err(PipelineError::Digest { .. })));
}

#[test]
fn comparison_of_a_run_with_a_degraded_copy() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = fixtures::corpus();
    let settings = RunSettings::new(PromptMode::Cot, DecodingProfile::gpt_cot());
    let a = RunStore::create(dir.path(), "a").unwrap();
    replay(&corpus, &fixtures::completions(), &settings, &a, "fixture").unwrap();
    let mut broken = fixtures::completions();
    for row in broken.iter_mut().step_by(2) {
        row.completions = vec!["nothing".into()];
    }
    let b = RunStore::create(dir.path(), "b").unwrap();
    replay(&corpus, &broken, &settings, &b, "fixture").unwrap();

    let options = EvalOptions {
        bootstrap: None,
        permutation: cystscribe_core::evalstats::Permutation { n_perm: 2000, seed: 3 },
        ..EvalOptions::default()
    };
    let annotations = fixtures::annotations();
    let (run_a, run_b) = (load_run(&a).unwrap(), load_run(&b).unwrap());
    let cmp = compare_runs(&run_a, &run_b, &annotations, &options).unwrap();
    assert_eq!(cmp.cases, 40);
    assert!(cmp.average_accuracy_a > cmp.average_accuracy_b);
    assert_eq!(cmp.tests.len(), 3);
    let field = cmp
        .tests
        .iter()
        .find(|t| t.name == "permutation_field_correctness")
        .unwrap();
    let result = field.result.as_ref().unwrap();
    assert!(result.p_value < 0.01);
    assert!(result.adjusted_p.unwrap() >= result.p_value);
    assert_eq!(result.rejected, Some(true));

    let report_b = evaluate_run(&run_b, &annotations, &options).unwrap();
    // Every other report, plus R024 which already failed.
    assert_eq!(report_b.failed_reports.len(), 21);
    assert_eq!(report_b.category_cases, 19);

    let err = evaluate_run(&run_a, &[], &options).unwrap_err();
    assert!(matches!(
        err,
        PipelineError::NoOverlap {
            run_only: 40,
            annotation_only: 0
        }
    ));
}
