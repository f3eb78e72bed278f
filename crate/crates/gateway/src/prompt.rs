use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

const SYSTEM_PROMPT: &str = include_str!("../assets/system_prompt.txt");
const EXEMPLAR_REPORT: &str = include_str!("../assets/exemplar_report.txt");
const EXEMPLAR_OUTPUT: &str = include_str!("../assets/exemplar_output.txt");

pub const SYSTEM_PROMPT_FILE: &str = "system_prompt.txt";
pub const EXEMPLAR_REPORT_FILE: &str = "exemplar_report.txt";
pub const EXEMPLAR_OUTPUT_FILE: &str = "exemplar_output.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Standard,
    Cot,
}

impl PromptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Standard => "standard",
            PromptMode::Cot => "cot",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "standard" => Some(PromptMode::Standard),
            "cot" => Some(PromptMode::Cot),
            _ => None,
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("report text is empty")]
    EmptyReport,
    #[error("prompt asset {0} is missing or empty")]
    MissingAsset(PathBuf),
    #[error("cot mode needs a one-shot exemplar but none is configured")]
    MissingExemplar,
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub report: String,
    pub output: String,
}

/// System instruction block plus the optional one-shot exemplar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptAssets {
    pub system_message: String,
    pub exemplar: Option<Exemplar>,
}

impl PromptAssets {
    /// Assets compiled into the crate. The exemplar is synthetic.
    pub fn bundled() -> Self {
        PromptAssets {
            system_message: SYSTEM_PROMPT.to_string(),
            exemplar: Some(Exemplar {
                report: EXEMPLAR_REPORT.to_string(),
                output: EXEMPLAR_OUTPUT.to_string(),
            }),
        }
    }

    /// Loads `system_prompt.txt` and, when both exist, `exemplar_report.txt`
    /// and `exemplar_output.txt` from `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let system_message = read_asset(&dir.join(SYSTEM_PROMPT_FILE))?
            .ok_or_else(|| PromptError::MissingAsset(dir.join(SYSTEM_PROMPT_FILE)))?;
        let report = read_asset(&dir.join(EXEMPLAR_REPORT_FILE))?;
        let output = read_asset(&dir.join(EXEMPLAR_OUTPUT_FILE))?;
        let exemplar = match (report, output) {
            (Some(report), Some(output)) => Some(Exemplar { report, output }),
            (None, None) => None,
            (Some(_), None) => return Err(PromptError::MissingAsset(dir.join(EXEMPLAR_OUTPUT_FILE))),
            (None, Some(_)) => return Err(PromptError::MissingAsset(dir.join(EXEMPLAR_REPORT_FILE))),
        };
        Ok(PromptAssets {
            system_message,
            exemplar,
        })
    }

    pub fn build(&self, report_text: &str, mode: PromptMode) -> Result<PromptBundle, PromptError> {
        if report_text.trim().is_empty() {
            return Err(PromptError::EmptyReport);
        }
        if self.system_message.trim().is_empty() {
            return Err(PromptError::MissingAsset(PathBuf::from(SYSTEM_PROMPT_FILE)));
        }
        let exemplar_turns = match mode {
            PromptMode::Standard => Vec::new(),
            PromptMode::Cot => {
                let ex = self.exemplar.as_ref().ok_or(PromptError::MissingExemplar)?;
                vec![(ex.report.clone(), ex.output.clone())]
            }
        };
        Ok(PromptBundle {
            system_message: self.system_message.clone(),
            exemplar_turns,
            user_report: report_text.to_string(),
        })
    }
}

fn read_asset(path: &Path) -> Result<Option<String>, PromptError> {
    match std::fs::read_to_string(path) {
        Ok(text) if text.trim().is_empty() => Ok(None),
        Ok(text) => Ok(Some(text)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(source) => Err(PromptError::Io {
            path: path.to_path_buf(),
            source,
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: &str, content: &str) -> Self {
        ChatMessage {
            role: role.into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_message: String,
    pub exemplar_turns: Vec<(String, String)>,
    pub user_report: String,
}

impl PromptBundle {
    pub fn mode(&self) -> PromptMode {
        if self.exemplar_turns.is_empty() {
            PromptMode::Standard
        } else {
            PromptMode::Cot
        }
    }

    /// System message, exemplar user/assistant pairs, then the report.
    pub fn messages(&self) -> Vec<ChatMessage> {
        let mut out = Vec::with_capacity(2 + 2 * self.exemplar_turns.len());
        out.push(ChatMessage::new("system", &self.system_message));
        for (report, answer) in &self.exemplar_turns {
            out.push(ChatMessage::new("user", report));
            out.push(ChatMessage::new("assistant", answer));
        }
        out.push(ChatMessage::new("user", &self.user_report));
        out
    }
}

/// Builds a prompt from the bundled assets.
pub fn build_prompt(report_text: &str, mode: PromptMode) -> Result<PromptBundle, PromptError> {
    PromptAssets::bundled().build(report_text, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cystscribe_core::schema::parse_record;
    use cystscribe_core::FeatureKey;

    #[test]
    fn modes_select_exemplar_count() {
        let standard = build_prompt("Pancreas: 5 mm cyst.", PromptMode::Standard).unwrap();
        assert!(standard.exemplar_turns.is_empty());
        assert_eq!(standard.messages().len(), 2);
        let cot = build_prompt("Pancreas: 5 mm cyst.", PromptMode::Cot).unwrap();
        assert_eq!(cot.exemplar_turns.len(), 1);
        let roles: Vec<_> = cot.messages().into_iter().map(|m| m.role).collect();
        assert_eq!(roles, ["system", "user", "assistant", "user"]);
        assert_eq!(cot.mode(), PromptMode::Cot);
    }

    #[test]
    fn empty_report_rejected() {
        assert!(matches!(
            build_prompt("  \n", PromptMode::Standard),
            Err(PromptError::EmptyReport)
        ));
    }

    #[test]
    fn bundled_exemplar_is_a_valid_worked_answer() {
        let ex = PromptAssets::bundled().exemplar.unwrap();
        let parsed = parse_record(&ex.output).unwrap();
        assert!(parsed.warnings.is_empty());
        assert_eq!(parsed.record.time_interval_months, Some(21));
        for key in FeatureKey::ALL {
            assert!(ex.output.contains(&format!("{}:\n", key.display_name())), "{key}");
            assert!(
                PromptAssets::bundled().system_message.contains(&format!("{key}:")),
                "{key}"
            );
        }
    }

    #[test]
    fn assets_from_dir() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            PromptAssets::from_dir(dir.path()),
            Err(PromptError::MissingAsset(_))
        ));
        std::fs::write(dir.path().join(SYSTEM_PROMPT_FILE), "extract").unwrap();
        let assets = PromptAssets::from_dir(dir.path()).unwrap();
        assert!(assets.exemplar.is_none());
        assert!(matches!(
            assets.build("r", PromptMode::Cot),
            Err(PromptError::MissingExemplar)
        ));
        std::fs::write(dir.path().join(EXEMPLAR_REPORT_FILE), "r").unwrap();
        assert!(PromptAssets::from_dir(dir.path()).is_err());
        std::fs::write(dir.path().join(EXEMPLAR_OUTPUT_FILE), "{}").unwrap();
        assert_eq!(
            PromptAssets::from_dir(dir.path())
                .unwrap()
                .build("r", PromptMode::Cot)
                .unwrap()
                .exemplar_turns
                .len(),
            1
        );
    }
}
