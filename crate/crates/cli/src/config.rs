//! The single TOML config file. Top-level keys are the training config;
//! `[http]` and `script` configure worker backends for `run`.

use std::path::{Path, PathBuf};

use orchestra::exec_engine::HttpConfig;
use orchestra::policy_sim::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, Default)]
pub struct FileConfig {
    pub train: TrainConfig,
    pub http: Option<HttpConfig>,
    /// Rule table for the scripted backend; the digest fallback otherwise.
    pub script: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))?;
        // Relative script paths are relative to the config file.
        if let (Some(script), Some(dir)) = (&mut cfg.script, path.parent()) {
            if script.is_relative() {
                *script = dir.join(&*script);
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
        let http = table
            .remove("http")
            .map(|v| v.try_into::<HttpConfig>())
            .transpose()
            .map_err(|e| format!("[http]: {e}"))?;
        let script = match table.remove("script") {
            Some(toml::Value::String(s)) => Some(PathBuf::from(s)),
            Some(other) => return Err(format!("`script` must be a path string, got {}", other.type_str())),
            None => None,
        };
        let train: TrainConfig = toml::Value::Table(table).try_into().map_err(|e| e.to_string())?;
        train.check().map_err(|e| e.to_string())?;
        Ok(Self { train, http, script })
    }
}
