use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use cystscribe_core::risk::RiskCategory;
use cystscribe_core::PclFeatureRecord;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::PipelineError;

/// Phrases that admit a report to the study cohort (matched case-insensitively).
pub const COHORT_KEYWORDS: [&str; 5] = [
    "pancreatic cystic lesions",
    "pancreatic cysts",
    "side-branch ipmn",
    "intraductal papillary mucinous neoplasm",
    "branch-duct ipmn",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "MRI")]
    Mri,
    #[serde(rename = "CT")]
    Ct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub report_id: String,
    pub patient_id: String,
    pub modality: Modality,
    pub report_text: String,
    pub signature_date: NaiveDate,
    #[serde(default)]
    pub prior_study_dates: Option<Vec<NaiveDate>>,
}

impl ReportDocument {
    pub fn oldest_prior(&self) -> Option<NaiveDate> {
        self.prior_study_dates.as_ref()?.iter().min().copied()
    }
}

/// Ground truth for one report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub report_id: String,
    pub record: PclFeatureRecord,
    #[serde(default)]
    pub risk_category: Option<RiskCategory>,
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    parse_jsonl(&text, path)
}

pub fn parse_jsonl<T: DeserializeOwned>(text: &str, path: &Path) -> Result<Vec<T>, PipelineError> {
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| PipelineError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> String {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).expect("row serializes"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), PipelineError> {
    let mut file = std::fs::File::create(path).map_err(|e| PipelineError::io(path, e))?;
    file.write_all(to_jsonl(rows).as_bytes())
        .map_err(|e| PipelineError::io(path, e))
}

/// Checks id uniqueness and non-empty text.
pub fn validate_corpus(corpus: &[ReportDocument]) -> Result<(), PipelineError> {
    let mut seen = HashSet::new();
    for doc in corpus {
        if doc.report_id.trim().is_empty() {
            return Err(PipelineError::Corpus("empty report_id".into()));
        }
        if !seen.insert(doc.report_id.as_str()) {
            return Err(PipelineError::Corpus(format!("duplicate report_id {}", doc.report_id)));
        }
        if doc.report_text.trim().is_empty() {
            return Err(PipelineError::Corpus(format!("report {} has no text", doc.report_id)));
        }
        if doc.oldest_prior().is_some_and(|p| p > doc.signature_date) {
            return Err(PipelineError::Corpus(format!(
                "report {} has a prior study after its signature date",
                doc.report_id
            )));
        }
    }
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Vec<ReportDocument>, PipelineError> {
    let corpus = read_jsonl(path)?;
    validate_corpus(&corpus)?;
    Ok(corpus)
}

pub fn load_annotations(path: &Path) -> Result<Vec<Annotation>, PipelineError> {
    let rows: Vec<Annotation> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    for row in &rows {
        if !seen.insert(row.report_id.as_str()) {
            return Err(PipelineError::Corpus(format!(
                "duplicate annotation for {}",
                row.report_id
            )));
        }
    }
    Ok(rows)
}

pub fn in_cohort(text: &str) -> bool {
    let lower = text.to_lowercase();
    COHORT_KEYWORDS.iter().any(|k| lower.contains(k))
}

pub fn cohort_filter(corpus: &[ReportDocument]) -> Vec<ReportDocument> {
    corpus.iter().filter(|d| in_cohort(&d.report_text)).cloned().collect()
}
