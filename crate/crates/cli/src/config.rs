//! `--config` files: an optional `preset`, a `[model]` table of overrides
//! on top of it, and a `[train]` table.

use std::path::Path;

use pmsr_core::model::ModelConfig;
use pmsr_core::train::TrainConfig;
use serde::Deserialize;

use crate::{CliError, CliResult};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub preset: Option<String>,
    pub model: Option<toml::Table>,
    pub train: Option<TrainConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    fn preset_name<'a>(&'a self, flag: Option<&'a str>) -> CliResult<Option<&'a str>> {
        match (flag, self.preset.as_deref()) {
            (Some(a), Some(b)) if a != b => Err(CliError::Usage(format!("--preset {a} conflicts with preset {b:?} in the config file"))),
            (a, b) => Ok(a.or(b)),
        }
    }

    /// The model the user asked for; `fallback` names the preset used when
    /// neither the flag nor the file chooses one.
    pub fn model(&self, flag: Option<&str>, fallback: &str, scale: Option<usize>) -> CliResult<ModelConfig> {
        let name = self.preset_name(flag)?.unwrap_or(fallback);
        let base = ModelConfig::preset(name)?;
        let mut table = toml::Table::try_from(&base).map_err(|e| CliError::Usage(e.to_string()))?;
        if let Some(over) = &self.model {
            for (k, v) in over {
                table.insert(k.clone(), v.clone());
            }
        }
        let mut cfg: ModelConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("[model]: {e}")))?;
        if let Some(r) = scale {
            cfg.scale = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// A model config only when the user named one, for checking checkpoints.
    pub fn explicit_model(&self, flag: Option<&str>) -> CliResult<Option<ModelConfig>> {
        if self.preset_name(flag)?.is_none() && self.model.is_none() {
            return Ok(None);
        }
        self.model(flag, "default", None).map(Some)
    }

    pub fn train(&self, seed: Option<u64>) -> CliResult<TrainConfig> {
        let mut cfg = self.train.clone().unwrap_or_default();
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
