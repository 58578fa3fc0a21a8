use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use deskformer_core::tokenizer::DEFAULT_SPECIALS;
use deskformer_core::{ExtensionConfig, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::UsageError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSettings {
    /// Ordinary-token count when a vocabulary has to be trained.
    pub vocab_size: usize,
    pub specials: Vec<String>,
}

impl Default for TokenizerSettings {
    fn default() -> Self {
        Self {
            vocab_size: 1024,
            specials: DEFAULT_SPECIALS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Everything a run needs. `model.vocab_size` of 0 means "take it from the vocabulary".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub model: ModelConfig,
    pub extension: ExtensionConfig,
    pub train: TrainConfig,
    pub tokenizer: TokenizerSettings,
    pub paths: Paths,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::new(0, 128, 4, 4, 256),
            extension: ExtensionConfig::off(),
            train: TrainConfig::default(),
            tokenizer: TokenizerSettings::default(),
            paths: Paths::default(),
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn specials(&self) -> Vec<&str> {
        self.tokenizer.specials.iter().map(String::as_str).collect()
    }
}

/// Reads the config file (if any) and applies `key=value` overrides, where the key is
/// a dotted path into the JSON document and the value is JSON (bare words are taken
/// as strings).
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<EngineConfig> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let parsed: EngineConfig =
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
            serde_json::to_value(parsed)?
        }
        None => serde_json::to_value(EngineConfig::default())?,
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: EngineConfig = serde_json::from_value(doc).map_err(|e| UsageError(format!("invalid override: {e}")))?;
    Ok(cfg)
}

fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!(UsageError(format!("--set expects key=value, got `{assignment}`")));
    };
    let mut slot = &mut *doc;
    for part in key.split('.') {
        slot = match slot.get_mut(part) {
            Some(s) => s,
            None => bail!(UsageError(format!("unknown config key `{key}`"))),
        };
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}
