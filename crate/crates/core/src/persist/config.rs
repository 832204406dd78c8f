use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::lm::{GenerateConfig, LmConfig, Vocabulary};
use crate::persist::Stage;
use crate::synth::SynthConfig;
use crate::tokenizer::TokenizerConfig;

/// Everything a run needs. Missing sections and keys take their defaults;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub synth: SynthConfig,
    pub tokenizer: TokenizerConfig,
    pub denoiser: DenoiserConfig,
    pub lm: LmConfig,
    pub generate: GenerateConfig,
}

impl Config {
    /// Reads TOML, or JSON when the extension is `.json`, and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)?
        } else {
            Self::from_toml(&text)?
        };
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to toml")
    }

    /// Section checks plus the cross-section constraints.
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.tokenizer.validate()?;
        self.denoiser.validate()?;
        self.lm.validate()?;
        self.generate.validate()?;
        let (s, t) = (&self.synth, &self.tokenizer);
        if s.dim != t.dim || s.grid_rows != t.grid_rows || s.grid_cols != t.grid_cols {
            return Err(Error::Config(format!(
                "synth grid {}x{}xD{} differs from tokenizer {}x{}xD{}",
                s.grid_rows, s.grid_cols, s.dim, t.grid_rows, t.grid_cols, t.dim
            )));
        }
        let longest = self.longest_sequence();
        if self.lm.context < longest {
            return Err(Error::Config(format!(
                "lm context {} is shorter than the longest paired sequence ({longest})",
                self.lm.context
            )));
        }
        Ok(())
    }

    /// BOS, IMG, N codes, /IMG, the longest caption and end-of-text.
    pub fn longest_sequence(&self) -> usize {
        let caption = self
            .synth
            .complexity_weights
            .keys()
            .copied()
            .max()
            .unwrap_or(0);
        4 + self.tokenizer.patches() + caption + 1
    }

    /// Text ids are the prototype labels plus end-of-text.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.synth.bank_size + 1, self.tokenizer.codebook_size)
    }

    /// SHA-256 over the canonical JSON of the settings that shape a stage's
    /// parameters and training.
    pub fn stage_digest(&self, stage: Stage) -> [u8; 32] {
        let scope = match stage {
            Stage::Tokenizer => serde_json::json!({ "tokenizer": self.tokenizer }),
            Stage::Denoiser => {
                serde_json::json!({ "tokenizer": self.tokenizer, "denoiser": self.denoiser })
            }
            Stage::Lm => serde_json::json!({
                "text_size": self.synth.bank_size + 1,
                "tokenizer": self.tokenizer,
                "lm": self.lm,
            }),
        };
        let bytes = serde_json::to_vec(&scope).expect("config serialises to json");
        Sha256::digest(&bytes).into()
    }
}
