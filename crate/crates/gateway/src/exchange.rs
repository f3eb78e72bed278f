use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

/// One HTTP attempt: the request body and whatever came back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeRecord {
    pub request_id: String,
    pub attempt: u32,
    pub endpoint: String,
    pub request: Value,
    #[serde(default)]
    pub status: Option<u16>,
    #[serde(default)]
    pub response: Option<String>,
    #[serde(default)]
    pub error: Option<String>,
}

pub trait ExchangeSink: Send + Sync {
    fn record(&self, exchange: &ExchangeRecord) -> io::Result<()>;
}

/// Append-only JSONL file, one exchange per line.
#[derive(Debug)]
pub struct ExchangeLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl ExchangeLog {
    pub fn open(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(ExchangeLog {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn read_all(path: &Path) -> io::Result<Vec<ExchangeRecord>> {
        let text = std::fs::read_to_string(path)?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(io::Error::other))
            .collect()
    }
}

impl ExchangeSink for ExchangeLog {
    fn record(&self, exchange: &ExchangeRecord) -> io::Result<()> {
        let mut line = serde_json::to_string(exchange).map_err(io::Error::other)?;
        line.push('\n');
        let mut file = self.file.lock().unwrap_or_else(|e| e.into_inner());
        file.write_all(line.as_bytes())?;
        file.flush()
    }
}

#[derive(Debug, Default)]
pub struct MemoryExchanges {
    records: Mutex<Vec<ExchangeRecord>>,
}

impl MemoryExchanges {
    pub fn snapshot(&self) -> Vec<ExchangeRecord> {
        self.records.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl ExchangeSink for MemoryExchanges {
    fn record(&self, exchange: &ExchangeRecord) -> io::Result<()> {
        self.records
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(exchange.clone());
        Ok(())
    }
}
