//! Blinded reader study: serves model outputs to radiologists without
//! revealing which model produced them, records their decisions and
//! reports agreement.

pub mod log;
pub mod server;
pub mod study;
pub mod summary;

pub use log::{AnnotationLog, ReaderAnnotation};
pub use server::{router, AppState, NextCase, ReaderServer, Submission};
pub use study::{ReaderCase, Study, StudyConfig};
pub use summary::{summarize, AgreementSummary};

use std::net::SocketAddr;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReaderError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("study configuration: {0}")]
    Config(String),
    #[error("annotation log: {0}")]
    Log(String),
    #[error("cannot bind {0}: {1}")]
    Bind(SocketAddr, std::io::Error),
}

impl ReaderError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ReaderError::Io {
            path: path.into(),
            source,
        }
    }
}
