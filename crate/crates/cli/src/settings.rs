//! The `--config` file and its layering with command-line flags.

use std::fs;
use std::path::Path;

use amt_core::dataset::FeatureConfig;
use amt_core::decoding::DecodeConfig;
use amt_core::experiments::RandomTrackRecipe;
use amt_core::metrics::MatchTolerances;
use amt_core::network::ModelConfig;
use amt_core::training::TrainConfig;
use amt_core::AmtError;
use anyhow::{Context, Result};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub noise_floor_amplitude: Option<f64>,
    pub peak_normalize: Option<bool>,
    pub sample_rate_hz: Option<u32>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub model: ModelConfig,
    /// Layered over the desk-scale training defaults.
    pub train: toml::Table,
    pub features: FeatureConfig,
    pub synth: SynthSection,
    pub recipe: RandomTrackRecipe,
    pub decode: DecodeConfig,
    pub tolerances: MatchTolerances,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Settings> {
        let Some(path) = path else {
            return Ok(Settings::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let settings: Settings = toml::from_str(&text)
            .map_err(|e| AmtError::Config(format!("{}: {e}", path.display())))?;
        Ok(settings)
    }

    /// Desk-scale defaults with the file's `[train]` table applied.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut table = match toml::Value::try_from(TrainConfig::desk_scale()) {
            Ok(toml::Value::Table(t)) => t,
            _ => unreachable!("train config serializes to a table"),
        };
        for (k, v) in &self.train {
            table.insert(k.clone(), v.clone());
        }
        let mut config: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| AmtError::Config(format!("[train]: {e}")))?;
        config.decode = self.decode;
        config.tolerances = self.tolerances;
        Ok(config)
    }
}
