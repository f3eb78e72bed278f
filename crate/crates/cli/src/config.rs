use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use cystscribe_core::cost::{CostConfig, FixedUsage, ModelUsage};
use cystscribe_core::evalstats::{Bootstrap, Permutation};
use cystscribe_core::grounding::GroundingConfig;
use cystscribe_core::schema::FieldComparisonPolicy;
use cystscribe_gateway::{DecodingProfile, EndpointConfig};
use serde::Deserialize;

/// The whole configuration file. Every section is optional; commands
/// complain about the sections they need. Secrets stay in environment
/// variables named by the file (for example `endpoint.api_key_env`).
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub endpoint: Option<EndpointConfig>,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub grounding: GroundingConfig,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    pub cost: Option<CostSection>,
    /// Where relative paths in this file are resolved from.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ProfileChoice {
    Preset(String),
    Custom(DecodingProfile),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub mode: String,
    pub profile: ProfileChoice,
    pub seed: u64,
    pub concurrency: usize,
    /// Directory with system_prompt.txt and the exemplar files. The bundled
    /// prompt is used when absent.
    pub prompt_dir: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            mode: "cot".into(),
            profile: ProfileChoice::Preset("gpt_cot".into()),
            seed: 0,
            concurrency: 8,
            prompt_dir: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub policy: FieldComparisonPolicy,
    pub n_boot: usize,
    pub confidence: f64,
    pub n_perm: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            policy: FieldComparisonPolicy::default(),
            n_boot: 10_000,
            confidence: 0.95,
            n_perm: 10_000,
            alpha: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    #[serde(default)]
    pub rates: CostConfig,
    #[serde(default)]
    pub fixed: FixedUsage,
    #[serde(default)]
    pub models: Vec<ModelUsage>,
}

impl Config {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config: Config = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(config)
    }

    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            Some(p) => Config::load(p),
            None => Ok(Config::default()),
        }
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn profile(&self) -> anyhow::Result<DecodingProfile> {
        let profile = match &self.run.profile {
            ProfileChoice::Preset(name) => DecodingProfile::preset(name)?,
            ProfileChoice::Custom(p) => p.clone(),
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn endpoint(&self) -> anyhow::Result<EndpointConfig> {
        match &self.endpoint {
            Some(e) => Ok(e.clone()),
            None => bail!("the configuration has no [endpoint] section"),
        }
    }

    pub fn bootstrap(&self) -> Option<Bootstrap> {
        (self.evaluate.n_boot > 0).then_some(Bootstrap {
            n_boot: self.evaluate.n_boot,
            level: self.evaluate.confidence,
            seed: self.evaluate.seed,
        })
    }

    pub fn permutation(&self) -> Permutation {
        Permutation {
            n_perm: self.evaluate.n_perm,
            seed: self.evaluate.seed,
        }
    }
}
