use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use chrono::{SecondsFormat, Utc};
use cystscribe_core::grounding::{
    grounding_report, GroundingConfig, GroundingSummary, LabeledObservation, ReportGrounding,
};
use cystscribe_core::FeatureKey;
use cystscribe_gateway::{
    DecodingProfile, EndpointConfig, ExchangeLog, ExchangeSink, FeatureNote, Gateway, PromptAssets, PromptMode,
};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tokio::task::JoinSet;

use crate::corpus::{to_jsonl, validate_corpus, ReportDocument};
use crate::stages::{self, AuditRow, CategoryRow, ParsedSample, RecordRow, RecordStatus, TallyRow};
use crate::store::{sha256_hex, CorpusRef, RunCounts, RunManifest, RunStore};
use crate::PipelineError;

pub const EXCHANGES: &str = "exchanges.jsonl";

#[derive(Debug, Clone)]
pub struct RunSettings {
    pub mode: PromptMode,
    pub profile: DecodingProfile,
    pub seed: u64,
    /// Reports in flight at once. The gateway applies its own request caps
    /// underneath this.
    pub concurrency: usize,
    pub grounding: GroundingConfig,
    pub assets: PromptAssets,
    /// Where the corpus came from, for the manifest.
    pub corpus_source: Option<String>,
}

impl RunSettings {
    pub fn new(mode: PromptMode, profile: DecodingProfile) -> Self {
        RunSettings {
            mode,
            profile,
            seed: 0,
            concurrency: 8,
            grounding: GroundingConfig::default(),
            assets: PromptAssets::bundled(),
            corpus_source: None,
        }
    }
}

/// Raw completions for one report, or the request error that replaced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRow {
    pub report_id: String,
    pub completions: Vec<String>,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSection {
    pub feature: FeatureKey,
    #[serde(flatten)]
    pub note: FeatureNote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub report_id: String,
    pub sample: usize,
    pub sections: Vec<TraceSection>,
    pub remainder: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingRow {
    pub report_id: String,
    #[serde(flatten)]
    pub grounding: ReportGrounding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureStage {
    Request,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRow {
    pub report_id: String,
    pub stage: FailureStage,
    pub error: String,
}

/// Sends every report to the endpoint, then runs the offline stages over
/// the completions. A report whose request or output fails is recorded in
/// `failures.jsonl` and does not stop the run.
pub async fn run_extraction(
    corpus: &[ReportDocument],
    settings: &RunSettings,
    endpoint: EndpointConfig,
    store: &RunStore,
) -> Result<RunManifest, PipelineError> {
    validate_corpus(corpus)?;
    settings.profile.validate()?;
    if settings.concurrency == 0 {
        return Err(PipelineError::Store("concurrency must be at least 1".into()));
    }
    let bundles = corpus
        .iter()
        .map(|doc| settings.assets.build(&doc.report_text, settings.mode))
        .collect::<Result<Vec<_>, _>>()?;
    let log_path = store.path(EXCHANGES);
    let log: Arc<dyn ExchangeSink> =
        Arc::new(ExchangeLog::open(&log_path).map_err(|e| PipelineError::io(&log_path, e))?);
    let endpoint_identity = endpoint.identity();
    let gateway = Gateway::new(endpoint, Some(log))?;
    let started_at = now();

    let permits = Arc::new(Semaphore::new(settings.concurrency));
    let mut tasks = JoinSet::new();
    for (index, bundle) in bundles.into_iter().enumerate() {
        let gateway = gateway.clone();
        let profile = settings.profile.clone();
        let permits = permits.clone();
        tasks.spawn(async move {
            let _permit = permits.acquire_owned().await.expect("semaphore open");
            (index, gateway.complete(&bundle, &profile).await)
        });
    }
    let mut results: HashMap<usize, CompletionRow> = HashMap::new();
    while let Some(joined) = tasks.join_next().await {
        let (index, outcome) = joined.map_err(|e| PipelineError::Store(e.to_string()))?;
        let report_id = corpus[index].report_id.clone();
        let row = match outcome {
            Ok(completions) => CompletionRow {
                report_id,
                completions,
                error: None,
            },
            Err(e) => {
                tracing::warn!(report = %report_id, error = %e, "request failed");
                CompletionRow {
                    report_id,
                    completions: Vec::new(),
                    error: Some(e.to_string()),
                }
            }
        };
        results.insert(index, row);
    }
    let completions: Vec<CompletionRow> = (0..corpus.len())
        .map(|i| results.remove(&i).expect("every task reports"))
        .collect();

    let mut manifest = RunManifest {
        run_id: run_id(store),
        corpus: corpus_ref(corpus, settings.corpus_source.clone()),
        prompt_mode: settings.mode.as_str().to_string(),
        profile: serde_json::to_value(&settings.profile).expect("profile serializes"),
        endpoint: endpoint_identity,
        seed: settings.seed,
        started_at,
        finished_at: None,
        counts: RunCounts::default(),
        artifacts: BTreeMap::new(),
    };
    manifest.artifacts.insert("exchanges".into(), store.seal(EXCHANGES)?);
    process_completions(corpus, &completions, settings, store, &mut manifest)?;
    manifest.finished_at = Some(now());
    store.write_manifest(&manifest)?;
    Ok(manifest)
}

/// Everything the offline stages produce for a set of completions.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutputs {
    pub records: Vec<RecordRow>,
    pub tallies: Vec<TallyRow>,
    pub traces: Vec<TraceRow>,
    pub audits: Vec<AuditRow>,
    pub categories: Vec<CategoryRow>,
    pub failures: Vec<FailureRow>,
    pub grounding: Vec<GroundingRow>,
    /// Counts and rates; per-report verdicts are in `grounding`.
    pub grounding_summary: GroundingSummary,
}

impl StageOutputs {
    pub fn counts(&self) -> RunCounts {
        let succeeded = self.records.iter().filter(|r| r.status == RecordStatus::Ok).count();
        RunCounts {
            reports: self.records.len(),
            succeeded,
            failed: self.records.len() - succeeded,
        }
    }

    /// Reports whose request itself failed.
    pub fn request_failures(&self) -> usize {
        self.failures
            .iter()
            .filter(|f| f.stage == FailureStage::Request)
            .count()
    }
}

/// The offline half of a run: parse, vote, audit, categorize and ground.
/// Every report in `corpus` needs a row in `completions`.
pub fn compute_stages(
    corpus: &[ReportDocument],
    completions: &[CompletionRow],
    settings: &RunSettings,
) -> Result<StageOutputs, PipelineError> {
    let by_id: HashMap<&str, &CompletionRow> = completions.iter().map(|c| (c.report_id.as_str(), c)).collect();
    let mut records = Vec::new();
    let mut tallies: Vec<TallyRow> = Vec::new();
    let mut traces = Vec::new();
    let mut audits: Vec<AuditRow> = Vec::new();
    let mut categories: Vec<CategoryRow> = Vec::new();
    let mut failures = Vec::new();
    let mut grounded_ids = Vec::new();
    let mut observation_lists: Vec<Vec<LabeledObservation>> = Vec::new();
    let mut grounded_texts = Vec::new();

    for doc in corpus {
        let Some(row) = by_id.get(doc.report_id.as_str()) else {
            return Err(PipelineError::Store(format!("no completions for {}", doc.report_id)));
        };
        if let Some(error) = &row.error {
            failures.push(FailureRow {
                report_id: doc.report_id.clone(),
                stage: FailureStage::Request,
                error: error.clone(),
            });
            records.push(RecordRow {
                report_id: doc.report_id.clone(),
                status: RecordStatus::Failed,
                record: None,
                warnings: Vec::new(),
                samples: 0,
                valid_samples: 0,
                error: Some(error.clone()),
            });
            continue;
        }
        let samples: Vec<ParsedSample> = row
            .completions
            .iter()
            .map(|t| stages::parse_sample(t, settings.mode))
            .collect();
        for (sample, parsed) in samples.iter().enumerate() {
            if let Some(trace) = &parsed.trace {
                traces.push(TraceRow {
                    report_id: doc.report_id.clone(),
                    sample,
                    sections: trace
                        .per_feature
                        .iter()
                        .map(|(feature, note)| TraceSection {
                            feature: *feature,
                            note: note.clone(),
                        })
                        .collect(),
                    remainder: trace.remainder.clone(),
                });
            }
        }
        let (record_row, tally) = stages::resolve(&doc.report_id, &samples);
        tallies.extend(tally);
        match &record_row.record {
            Some(record) => {
                audits.push(stages::audit(doc, record));
                categories.push(stages::assess(&doc.report_id, record));
                grounded_ids.push(doc.report_id.clone());
                observation_lists.push(stages::observations(&samples));
                grounded_texts.push(doc.report_text.as_str());
            }
            None => failures.push(FailureRow {
                report_id: doc.report_id.clone(),
                stage: FailureStage::Validation,
                error: record_row.error.clone().unwrap_or_default(),
            }),
        }
        records.push(record_row);
    }

    let mut grounding_summary = grounding_report(&settings.grounding, &observation_lists, &grounded_texts)
        .expect("one observation list per grounded report");
    let grounding = std::mem::take(&mut grounding_summary.reports)
        .into_iter()
        .zip(&grounded_ids)
        .map(|(grounding, id)| GroundingRow {
            report_id: id.clone(),
            grounding,
        })
        .collect();
    Ok(StageOutputs {
        records,
        tallies,
        traces,
        audits,
        categories,
        failures,
        grounding,
        grounding_summary,
    })
}

/// Runs the offline stages and stores their artifacts, adding them and the
/// counts to `manifest`.
pub fn process_completions(
    corpus: &[ReportDocument],
    completions: &[CompletionRow],
    settings: &RunSettings,
    store: &RunStore,
    manifest: &mut RunManifest,
) -> Result<StageOutputs, PipelineError> {
    let out = compute_stages(corpus, completions, settings)?;
    manifest.counts = out.counts();
    let artifacts = &mut manifest.artifacts;
    artifacts.insert(
        "completions".into(),
        store.write_jsonl("completions.jsonl", completions)?,
    );
    artifacts.insert("traces".into(), store.write_jsonl("traces.jsonl", &out.traces)?);
    artifacts.insert("records".into(), store.write_jsonl("records.jsonl", &out.records)?);
    artifacts.insert("tallies".into(), store.write_jsonl("tallies.jsonl", &out.tallies)?);
    artifacts.insert("audit".into(), store.write_jsonl("audit.jsonl", &out.audits)?);
    artifacts.insert(
        "categories".into(),
        store.write_jsonl("categories.jsonl", &out.categories)?,
    );
    artifacts.insert(
        "grounding".into(),
        store.write_jsonl("grounding.jsonl", &out.grounding)?,
    );
    artifacts.insert(
        "grounding_summary".into(),
        store.write_json("grounding_summary.json", &out.grounding_summary)?,
    );
    artifacts.insert("failures".into(), store.write_jsonl("failures.jsonl", &out.failures)?);
    Ok(out)
}

/// Re-runs the offline stages from a file of completions, for example one
/// produced elsewhere or by an earlier run.
pub fn replay(
    corpus: &[ReportDocument],
    completions: &[CompletionRow],
    settings: &RunSettings,
    store: &RunStore,
    endpoint: &str,
) -> Result<RunManifest, PipelineError> {
    validate_corpus(corpus)?;
    let mut manifest = RunManifest {
        run_id: run_id(store),
        corpus: corpus_ref(corpus, settings.corpus_source.clone()),
        prompt_mode: settings.mode.as_str().to_string(),
        profile: serde_json::to_value(&settings.profile).expect("profile serializes"),
        endpoint: endpoint.to_string(),
        seed: settings.seed,
        started_at: now(),
        finished_at: None,
        counts: RunCounts::default(),
        artifacts: BTreeMap::new(),
    };
    process_completions(corpus, completions, settings, store, &mut manifest)?;
    manifest.finished_at = Some(now());
    store.write_manifest(&manifest)?;
    Ok(manifest)
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn run_id(store: &RunStore) -> String {
    store
        .dir()
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn corpus_ref(corpus: &[ReportDocument], source: Option<String>) -> CorpusRef {
    CorpusRef {
        source,
        sha256: sha256_hex(to_jsonl(corpus).as_bytes()),
        reports: corpus.len(),
    }
}
