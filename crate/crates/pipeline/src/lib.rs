//! Batch pipeline: corpus handling, extraction runs and their evaluation.

pub mod corpus;
pub mod evaluate;
pub mod fixtures;
pub mod run;
pub mod split;
pub mod stages;
pub mod store;

pub use corpus::{cohort_filter, Annotation, Modality, ReportDocument};
pub use evaluate::{compare_runs, evaluate_run, ComparisonReport, EvalOptions, EvalReport};
pub use run::{run_extraction, RunSettings};
pub use split::{patient_level_split, PatientSplit, SplitFractions};
pub use store::{Artifact, RunManifest, RunStore};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid corpus: {0}")]
    Corpus(String),
    #[error("invalid split fractions: {0}")]
    Fractions(String),
    #[error(transparent)]
    Gateway(#[from] cystscribe_gateway::GatewayError),
    #[error(transparent)]
    Prompt(#[from] cystscribe_gateway::PromptError),
    #[error(transparent)]
    Profile(#[from] cystscribe_gateway::profile::ProfileError),
    #[error("artifact {name} does not match its recorded digest")]
    Digest { name: String },
    #[error("run store: {0}")]
    Store(String),
    #[error("evaluation: {0}")]
    Eval(String),
    #[error(
        "no report ids in common between run and annotations ({run_only} run-only, {annotation_only} annotation-only)"
    )]
    NoOverlap { run_only: usize, annotation_only: usize },
}

impl PipelineError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.into(),
            source,
        }
    }
}
