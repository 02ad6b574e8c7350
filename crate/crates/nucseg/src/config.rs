//! TOML configuration files.

use std::path::Path;

use nucseg_core::pipeline::PipelineConfig;

use crate::trace;

#[derive(Debug, thiserror::Error)]
pub enum ConfigFileError {
    #[error("{path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: String, source: toml::de::Error },
    #[error("cannot serialize configuration: {0}")]
    Serialize(#[from] toml::ser::Error),
}

/// Parses a configuration. Missing keys take their defaults; unknown keys
/// are errors.
pub fn parse(text: &str) -> Result<PipelineConfig, toml::de::Error> {
    toml::from_str(text)
}

pub fn load(path: &Path) -> Result<PipelineConfig, ConfigFileError> {
    let text = trace::read_to_string(path)
        .map_err(|source| ConfigFileError::Read { path: path.display().to_string(), source })?;
    parse(&text).map_err(|source| ConfigFileError::Parse { path: path.display().to_string(), source })
}

/// The fully resolved configuration, every key spelled out.
pub fn to_toml(config: &PipelineConfig) -> Result<String, ConfigFileError> {
    Ok(toml::to_string_pretty(config)?)
}
