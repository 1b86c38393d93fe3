use std::path::Path;

use protosplit::detect::DetectionConfig;
use protosplit::pipeline::SplitConfig;
use serde::Deserialize;

use crate::commands::CliError;

/// Overrides read from `--config`. Every table and key is optional:
///
/// ```toml
/// [split]
/// min_concept = 3
/// [split.hyper]
/// learning_rate = 2e-4
/// [split.finetune]
/// epochs = 2
/// [detection]
/// delta_step = 0.01
/// ```
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub split: SplitConfig,
    pub detection: DetectionConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}
