use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use cystscribe_core::risk::RiskCategory;
use cystscribe_core::PclFeatureRecord;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ReaderError;

pub const CONFIG_FILE: &str = "study.toml";
pub const CASES_FILE: &str = "cases.jsonl";
pub const LOG_FILE: &str = "annotations.jsonl";
pub const STATIC_DIR: &str = "static";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReaderEntry {
    pub id: String,
    #[serde(default)]
    pub token: Option<String>,
    /// Environment variable holding the token, used when `token` is absent.
    #[serde(default)]
    pub token_env: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub seed: u64,
    /// Token for the summary and progress endpoints.
    #[serde(default)]
    pub admin_token: Option<String>,
    #[serde(default)]
    pub admin_token_env: Option<String>,
    pub readers: Vec<ReaderEntry>,
    #[serde(default = "default_n_perm")]
    pub n_perm: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_n_perm() -> usize {
    10_000
}

fn default_alpha() -> f64 {
    0.05
}

/// One model's output for one report, as prepared for review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderCase {
    pub case_id: String,
    pub report_text: String,
    pub model_features: PclFeatureRecord,
    pub model_category: RiskCategory,
    /// Never sent to readers.
    pub model_source: String,
}

/// Loaded study with resolved tokens and per-reader presentation orders.
#[derive(Debug, Clone)]
pub struct Study {
    pub config: StudyConfig,
    pub items: Vec<ReaderCase>,
    pub dir: Option<PathBuf>,
    admin_token: Option<String>,
    tokens: HashMap<String, String>,
    orders: HashMap<String, Vec<usize>>,
    sources: Vec<String>,
}

fn resolve_token(literal: &Option<String>, env: &Option<String>, owner: &str) -> Result<Option<String>, ReaderError> {
    let token = match (literal, env) {
        (Some(t), _) => Some(t.clone()),
        (None, Some(var)) => Some(
            std::env::var(var)
                .map_err(|_| ReaderError::Config(format!("{owner}: environment variable {var} is not set")))?,
        ),
        (None, None) => None,
    };
    if token.as_deref().is_some_and(|t| t.trim().is_empty()) {
        return Err(ReaderError::Config(format!("{owner}: empty token")));
    }
    Ok(token)
}

/// Seed for one reader's shuffle, from the study seed and the reader id.
pub fn reader_seed(study_seed: u64, reader_id: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(study_seed.to_le_bytes());
    hasher.update(reader_id.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("eight bytes"))
}

pub fn presentation_order(study_seed: u64, reader_id: &str, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(reader_seed(study_seed, reader_id)));
    order
}

impl Study {
    pub fn new(config: StudyConfig, items: Vec<ReaderCase>) -> Result<Self, ReaderError> {
        if config.readers.is_empty() {
            return Err(ReaderError::Config("no readers configured".into()));
        }
        if items.is_empty() {
            return Err(ReaderError::Config("no cases".into()));
        }
        if !(config.alpha > 0.0 && config.alpha < 1.0) {
            return Err(ReaderError::Config(format!("alpha {} is outside (0, 1)", config.alpha)));
        }
        let mut seen = HashSet::new();
        for item in &items {
            if item.model_source.trim().is_empty() {
                return Err(ReaderError::Config(format!(
                    "case {} has no model source",
                    item.case_id
                )));
            }
            if !seen.insert((item.case_id.as_str(), item.model_source.as_str())) {
                return Err(ReaderError::Config(format!(
                    "case {} appears twice for one model source",
                    item.case_id
                )));
            }
        }
        let mut tokens = HashMap::new();
        let mut orders = HashMap::new();
        for reader in &config.readers {
            if reader.id.trim().is_empty() {
                return Err(ReaderError::Config("reader with empty id".into()));
            }
            let token = resolve_token(&reader.token, &reader.token_env, &reader.id)?
                .ok_or_else(|| ReaderError::Config(format!("reader {} has no token", reader.id)))?;
            if tokens.values().any(|t| *t == token) {
                return Err(ReaderError::Config(format!("reader {} reuses a token", reader.id)));
            }
            if tokens.insert(reader.id.clone(), token).is_some() {
                return Err(ReaderError::Config(format!("reader {} listed twice", reader.id)));
            }
            orders.insert(
                reader.id.clone(),
                presentation_order(config.seed, &reader.id, items.len()),
            );
        }
        let admin_token = resolve_token(&config.admin_token, &config.admin_token_env, "admin")?;
        if admin_token.as_ref().is_some_and(|a| tokens.values().any(|t| t == a)) {
            return Err(ReaderError::Config("admin token equals a reader token".into()));
        }
        let mut sources: Vec<String> = items.iter().map(|i| i.model_source.clone()).collect();
        sources.sort();
        sources.dedup();
        Ok(Study {
            config,
            items,
            dir: None,
            admin_token,
            tokens,
            orders,
            sources,
        })
    }

    /// Reads `study.toml` and `cases.jsonl` from `dir`.
    pub fn load(dir: &Path) -> Result<Self, ReaderError> {
        let config_path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&config_path).map_err(|e| ReaderError::io(&config_path, e))?;
        let config: StudyConfig =
            toml::from_str(&text).map_err(|e| ReaderError::Config(format!("{}: {e}", config_path.display())))?;
        let cases_path = dir.join(CASES_FILE);
        let text = std::fs::read_to_string(&cases_path).map_err(|e| ReaderError::io(&cases_path, e))?;
        let items = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| ReaderError::Config(format!("{}:{}: {e}", cases_path.display(), i + 1)))
            })
            .collect::<Result<Vec<ReaderCase>, _>>()?;
        let mut study = Study::new(config, items)?;
        study.dir = Some(dir.to_path_buf());
        Ok(study)
    }

    pub fn log_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(LOG_FILE))
    }

    pub fn static_dir(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(STATIC_DIR)).filter(|d| d.is_dir())
    }

    pub fn reader_ids(&self) -> impl Iterator<Item = &str> {
        self.config.readers.iter().map(|r| r.id.as_str())
    }

    pub fn has_reader(&self, reader_id: &str) -> bool {
        self.tokens.contains_key(reader_id)
    }

    /// The reader whose token this is.
    pub fn reader_for_token(&self, token: &str) -> Option<&str> {
        self.tokens
            .iter()
            .find(|(_, t)| constant_time_eq(t.as_bytes(), token.as_bytes()))
            .map(|(id, _)| id.as_str())
    }

    pub fn is_admin(&self, token: &str) -> bool {
        self.admin_token
            .as_deref()
            .is_some_and(|a| constant_time_eq(a.as_bytes(), token.as_bytes()))
    }

    pub fn order(&self, reader_id: &str) -> Option<&[usize]> {
        self.orders.get(reader_id).map(Vec::as_slice)
    }

    pub fn model_sources(&self) -> &[String] {
        &self.sources
    }
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}
