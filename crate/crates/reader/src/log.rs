use std::fs::{File, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use cystscribe_core::risk::RiskCategory;
use serde::{Deserialize, Serialize};

use crate::ReaderError;

/// One stored decision. `model_source` is kept here for scoring and never
/// leaves the service through reader endpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReaderAnnotation {
    pub case_id: String,
    pub reader_id: String,
    pub model_source: String,
    pub presentation_order: usize,
    pub agrees_with_model: bool,
    pub reader_category: RiskCategory,
    pub submitted_at: String,
}

/// Append-only JSONL log. Each append is flushed to disk before it returns.
#[derive(Debug)]
pub struct AnnotationLog {
    path: Option<PathBuf>,
    file: Option<File>,
}

impl AnnotationLog {
    /// Keeps annotations in memory only.
    pub fn ephemeral() -> Self {
        AnnotationLog { path: None, file: None }
    }

    /// Opens `path` for appending and returns the annotations already in
    /// it. A final line cut short by a crash is dropped from the file.
    pub fn open(path: &Path) -> Result<(Self, Vec<ReaderAnnotation>), ReaderError> {
        let text = match std::fs::read_to_string(path) {
            Ok(text) => text,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(ReaderError::io(path, e)),
        };
        let mut rows = Vec::new();
        let mut keep = 0usize;
        let mut offset = 0usize;
        for (i, line) in text.split_inclusive('\n').enumerate() {
            let complete = line.ends_with('\n');
            offset += line.len();
            if line.trim().is_empty() {
                keep = offset;
                continue;
            }
            if !complete {
                tracing::warn!(path = %path.display(), line = i + 1, "dropping torn final line");
                break;
            }
            let row = serde_json::from_str::<ReaderAnnotation>(line)
                .map_err(|e| ReaderError::Log(format!("{}:{}: {e}", path.display(), i + 1)))?;
            rows.push(row);
            keep = offset;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .write(true)
            .truncate(false)
            .open(path)
            .map_err(|e| ReaderError::io(path, e))?;
        if keep < text.len() {
            file.set_len(keep as u64).map_err(|e| ReaderError::io(path, e))?;
            file.sync_all().map_err(|e| ReaderError::io(path, e))?;
        }
        file.seek(SeekFrom::End(0)).map_err(|e| ReaderError::io(path, e))?;
        Ok((
            AnnotationLog {
                path: Some(path.to_path_buf()),
                file: Some(file),
            },
            rows,
        ))
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn append(&mut self, row: &ReaderAnnotation) -> Result<(), ReaderError> {
        let Some(file) = self.file.as_mut() else {
            return Ok(());
        };
        let path = self.path.as_deref().unwrap_or(Path::new(""));
        let mut line = serde_json::to_string(row).expect("annotation serializes");
        line.push('\n');
        file.write_all(line.as_bytes()).map_err(|e| ReaderError::io(path, e))?;
        file.sync_data().map_err(|e| ReaderError::io(path, e))
    }
}
