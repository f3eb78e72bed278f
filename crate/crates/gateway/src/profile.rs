use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sampling parameters sent with every request of one logical call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingProfile {
    pub name: String,
    pub temperature: f64,
    pub top_p: f64,
    pub num_samples: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beams: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProfileError {
    #[error("profile {0}: temperature must be finite and >= 0")]
    Temperature(String),
    #[error("profile {0}: top_p must lie in (0, 1]")]
    TopP(String),
    #[error("profile {0}: num_samples must be positive")]
    Samples(String),
    #[error("profile {0}: beams must be positive")]
    Beams(String),
    #[error("unknown decoding profile {0:?}")]
    Unknown(String),
}

impl DecodingProfile {
    pub const PRESETS: [&'static str; 4] = ["gpt_standard", "gpt_cot", "beam5", "self_consistency"];

    pub fn gpt_standard() -> Self {
        Self::sampling("gpt_standard", 0.0, 1.0, 1)
    }

    pub fn gpt_cot() -> Self {
        Self::sampling("gpt_cot", 0.2, 1.0, 1)
    }

    pub fn beam5() -> Self {
        DecodingProfile {
            name: "beam5".into(),
            temperature: 0.0,
            top_p: 1.0,
            num_samples: 1,
            beams: Some(5),
        }
    }

    pub fn self_consistency() -> Self {
        Self::sampling("self_consistency", 0.4, 0.9, 40)
    }

    pub fn sampling(name: &str, temperature: f64, top_p: f64, num_samples: u32) -> Self {
        DecodingProfile {
            name: name.into(),
            temperature,
            top_p,
            num_samples,
            beams: None,
        }
    }

    pub fn preset(name: &str) -> Result<Self, ProfileError> {
        match name {
            "gpt_standard" => Ok(Self::gpt_standard()),
            "gpt_cot" => Ok(Self::gpt_cot()),
            "beam5" => Ok(Self::beam5()),
            "self_consistency" => Ok(Self::self_consistency()),
            other => Err(ProfileError::Unknown(other.into())),
        }
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(ProfileError::Temperature(self.name.clone()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ProfileError::TopP(self.name.clone()));
        }
        if self.num_samples == 0 {
            return Err(ProfileError::Samples(self.name.clone()));
        }
        if self.beams == Some(0) {
            return Err(ProfileError::Beams(self.name.clone()));
        }
        Ok(())
    }

    pub fn is_beam(&self) -> bool {
        self.beams.is_some()
    }

    /// Completions a call returns: the best beam for beam profiles, otherwise one per sample.
    pub fn expected_completions(&self) -> u32 {
        if self.is_beam() {
            1
        } else {
            self.num_samples
        }
    }
}
