use std::path::Path;

use kolmo_chain::chain_model::ModelSpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::output::Format;

/// A config file as written by the user. `params` is checked against the
/// command's own parameter type once the command is known.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub command: Option<String>,
    pub seed: Option<u64>,
    pub format: Option<Format>,
    pub out: Option<String>,
    pub threads: Option<usize>,
    pub model: Option<ModelSpec>,
    pub params: Option<toml::Table>,
}

/// Everything that determines a run's results; hashed into the output directory name.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedConfig {
    pub command: String,
    pub seed: u64,
    pub format: Format,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    pub params: Value,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: String,
    pub hash: String,
    pub config: ResolvedConfig,
}

#[derive(Debug)]
pub enum ConfigError {
    Io(std::io::Error),
    Parse(String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Io(e) => write!(f, "cannot read config: {e}"),
            ConfigError::Parse(m) => write!(f, "invalid config: {m}"),
        }
    }
}

pub enum Loaded {
    Raw(RawConfig),
    Manifest(Manifest),
}

/// Reads a TOML config, or a `manifest.json` written by an earlier run.
pub fn load(path: &Path) -> Result<Loaded, ConfigError> {
    let s = std::fs::read_to_string(path).map_err(ConfigError::Io)?;
    if path.extension().is_some_and(|e| e == "json") {
        let m: Manifest = serde_json::from_str(&s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        return Ok(Loaded::Manifest(m));
    }
    let raw: RawConfig = toml::from_str(&s).map_err(|e| ConfigError::Parse(e.to_string()))?;
    Ok(Loaded::Raw(raw))
}

impl ResolvedConfig {
    /// sha256 over the canonical JSON (keys sorted) of the resolved config.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(&serde_json::to_value(self).expect("config serializes"))
            .expect("json value serializes");
        Sha256::digest(canon.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

pub fn version() -> String {
    format!("kolmo-chain {}", env!("CARGO_PKG_VERSION"))
}
