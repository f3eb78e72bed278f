//! Pure per-report stages. Nothing here touches the network or disk.

use std::collections::BTreeMap;

use cystscribe_core::consensus::{aggregate, VoteTally};
use cystscribe_core::derive::{audit_record, AuditFinding, StudyDatePair};
use cystscribe_core::grounding::LabeledObservation;
use cystscribe_core::risk::{categorize, RiskAssessment};
use cystscribe_core::schema::{parse_record, ValidationWarning};
use cystscribe_core::{FeatureKey, PclFeatureRecord};
use cystscribe_gateway::{parse_trace, PromptMode, ReasoningTrace};
use serde::{Deserialize, Serialize};

use crate::corpus::ReportDocument;

/// One completion after trace splitting and record validation.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedSample {
    pub trace: Option<ReasoningTrace>,
    pub outcome: Result<(PclFeatureRecord, Vec<ValidationWarning>), String>,
}

pub fn parse_sample(text: &str, mode: PromptMode) -> ParsedSample {
    match parse_trace(text, mode) {
        Err(_) => ParsedSample {
            trace: None,
            outcome: Err("completion holds no JSON object".into()),
        },
        Ok(parsed) => ParsedSample {
            outcome: parse_record(&parsed.candidate)
                .map(|p| (p.record, p.warnings))
                .map_err(|e| e.to_string()),
            trace: parsed.trace,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Ok,
    Failed,
}

/// The record kept for a report, or why there is none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub report_id: String,
    pub status: RecordStatus,
    pub record: Option<PclFeatureRecord>,
    pub warnings: Vec<ValidationWarning>,
    pub samples: usize,
    pub valid_samples: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TallyRow {
    pub report_id: String,
    pub tallies: BTreeMap<FeatureKey, VoteTally>,
}

/// A single sample is taken as is; several are put to a per-key vote over
/// the samples that validated.
pub fn resolve(report_id: &str, samples: &[ParsedSample]) -> (RecordRow, Option<TallyRow>) {
    let valid: Vec<&(PclFeatureRecord, Vec<ValidationWarning>)> =
        samples.iter().filter_map(|s| s.outcome.as_ref().ok()).collect();
    let mut row = RecordRow {
        report_id: report_id.to_string(),
        status: RecordStatus::Failed,
        record: None,
        warnings: Vec::new(),
        samples: samples.len(),
        valid_samples: valid.len(),
        error: None,
    };
    if valid.is_empty() {
        row.error = Some(match samples {
            [] => "no completions".to_string(),
            [only] => only.outcome.clone().err().unwrap_or_default(),
            _ => format!(
                "all {} samples failed validation; first: {}",
                samples.len(),
                samples[0].outcome.clone().err().unwrap_or_default()
            ),
        });
        return (row, None);
    }
    if samples.len() == 1 {
        let (record, warnings) = valid[0].clone();
        row.status = RecordStatus::Ok;
        row.record = Some(record);
        row.warnings = warnings;
        return (row, None);
    }
    let records: Vec<PclFeatureRecord> = valid.iter().map(|(r, _)| r.clone()).collect();
    match aggregate(&records) {
        Ok(agg) => {
            row.status = RecordStatus::Ok;
            row.record = Some(agg.record);
            (
                row,
                Some(TallyRow {
                    report_id: report_id.to_string(),
                    tallies: agg.tallies,
                }),
            )
        }
        Err(e) => {
            row.error = Some(e.to_string());
            (row, None)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub report_id: String,
    pub findings: Vec<AuditFinding>,
}

pub fn audit(doc: &ReportDocument, record: &PclFeatureRecord) -> AuditRow {
    let dates = doc
        .oldest_prior()
        .map(|prior| StudyDatePair::new(doc.signature_date, prior));
    AuditRow {
        report_id: doc.report_id.clone(),
        findings: audit_record(record, dates.as_ref()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub report_id: String,
    #[serde(flatten)]
    pub assessment: RiskAssessment,
}

pub fn assess(report_id: &str, record: &PclFeatureRecord) -> CategoryRow {
    CategoryRow {
        report_id: report_id.to_string(),
        assessment: categorize(record),
    }
}

/// Observations quoted in every sample's trace, labelled by feature key.
pub fn observations(samples: &[ParsedSample]) -> Vec<LabeledObservation> {
    samples
        .iter()
        .filter_map(|s| s.trace.as_ref())
        .flat_map(|t| t.observations())
        .map(|(key, text)| LabeledObservation {
            feature: key.as_str().to_string(),
            text: text.to_string(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use cystscribe_core::schema::canonical_serialize;

    fn json(record: &PclFeatureRecord) -> String {
        canonical_serialize(record)
    }

    fn base() -> PclFeatureRecord {
        PclFeatureRecord {
            num_cysts_measured: Some(1),
            size_mm: Some(10.0),
            ..Default::default()
        }
    }

    #[test]
    fn single_sample_passes_through_with_warnings() {
        let text = r#"{"num_cysts_measured": 0}"#;
        let (row, tally) = resolve("a", &[parse_sample(text, PromptMode::Standard)]);
        assert_eq!(row.status, RecordStatus::Ok);
        assert!(tally.is_none());
        assert!(!row.warnings.is_empty());
    }

    #[test]
    fn votes_skip_invalid_samples() {
        let mut big = base();
        big.size_mm = Some(20.0);
        let texts = [json(&base()), json(&base()), json(&big), "no object".to_string()];
        let samples: Vec<ParsedSample> = texts.iter().map(|t| parse_sample(t, PromptMode::Standard)).collect();
        let (row, tally) = resolve("a", &samples);
        assert_eq!(row.valid_samples, 3);
        assert_eq!(row.record.unwrap().size_mm, Some(10.0));
        let tally = tally.unwrap();
        assert_eq!(tally.tallies[&FeatureKey::SizeMm].margin, 1);
    }

    #[test]
    fn all_invalid_fails_with_reason() {
        let samples = [parse_sample("{\"size_mm\": \"big\"", PromptMode::Standard)];
        let (row, _) = resolve("a", &samples);
        assert_eq!(row.status, RecordStatus::Failed);
        assert!(row.record.is_none());
        assert!(row.error.unwrap().contains("JSON"));
    }
}
