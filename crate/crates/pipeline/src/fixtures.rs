//! A small scripted corpus with hand-scored expectations, used by the tests
//! and by `cystscribe stub` for offline runs.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use cystscribe_gateway::stub::{Responder, StubReply};
use serde::Deserialize;

use crate::corpus::{parse_jsonl, Annotation, ReportDocument};
use crate::run::CompletionRow;

const CORPUS: &str = include_str!("../fixtures/corpus.jsonl");
const ANNOTATIONS: &str = include_str!("../fixtures/annotations.jsonl");
const COMPLETIONS: &str = include_str!("../fixtures/completions.jsonl");
const EXPECTED: &str = include_str!("../fixtures/expected_scores.json");

pub fn corpus_jsonl() -> &'static str {
    CORPUS
}

pub fn annotations_jsonl() -> &'static str {
    ANNOTATIONS
}

pub fn completions_jsonl() -> &'static str {
    COMPLETIONS
}

pub fn expected_jsonl() -> &'static str {
    EXPECTED
}

pub fn corpus() -> Vec<ReportDocument> {
    parse_jsonl(CORPUS, Path::new("fixtures/corpus.jsonl")).expect("fixture corpus parses")
}

pub fn annotations() -> Vec<Annotation> {
    parse_jsonl(ANNOTATIONS, Path::new("fixtures/annotations.jsonl")).expect("fixture annotations parse")
}

pub fn completions() -> Vec<CompletionRow> {
    parse_jsonl(COMPLETIONS, Path::new("fixtures/completions.jsonl")).expect("fixture completions parse")
}

#[derive(Debug, Clone, Deserialize)]
pub struct InjectedError {
    pub report_id: String,
    pub feature: String,
    pub category: String,
    pub predicted: serde_json::Value,
    pub truth: serde_json::Value,
}

/// Scores worked out by hand for the scripted completions.
#[derive(Debug, Clone, Deserialize)]
pub struct ExpectedScores {
    pub cases: usize,
    pub failed_reports: Vec<String>,
    pub risk_categories: BTreeMap<String, usize>,
    pub injected_errors: Vec<InjectedError>,
    pub mismatches: BTreeMap<String, Vec<String>>,
    pub matches: BTreeMap<String, usize>,
    pub grounding_counts: BTreeMap<String, usize>,
}

pub fn expected() -> ExpectedScores {
    serde_json::from_str(EXPECTED).expect("fixture expectations parse")
}

/// Answers each request with the scripted completions for the report in its
/// user turn, cycling through them when more choices are asked for.
/// Unknown reports get a 400.
pub fn stub_responder(corpus: &[ReportDocument], completions: &[CompletionRow]) -> Responder {
    let by_id: HashMap<&str, &CompletionRow> = completions.iter().map(|c| (c.report_id.as_str(), c)).collect();
    let script: HashMap<String, Vec<String>> = corpus
        .iter()
        .filter_map(|doc| {
            let row = by_id.get(doc.report_id.as_str())?;
            Some((doc.report_text.trim().to_string(), row.completions.clone()))
        })
        .collect();
    Arc::new(move |req| match script.get(req.user_report().trim()) {
        Some(texts) if !texts.is_empty() => {
            StubReply::Choices(texts.iter().cycle().take(req.n.max(1)).cloned().collect())
        }
        _ => StubReply::Status {
            status: 400,
            retry_after: None,
            body: "unknown report".into(),
        },
    })
}
