//! `key = value` configuration files with `#` comments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::warn;
use thiserror::Error;

use mgvo_core::node::{DEFAULT_HEARTBEAT_MS, DEFAULT_QUERY_TIMEOUT_MS};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },
    #[error("missing required key `{0}`")]
    MissingKey(String),
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

/// Raw key/value pairs plus the warnings produced while reading them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigFile {
    pub values: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut file = ConfigFile::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            if file.values.insert(k.to_string(), v.to_string()).is_some() {
                let w = format!("line {}: duplicate key `{k}`, last value wins", i + 1);
                warn!("{w}");
                file.warnings.push(w);
            }
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::UnreadableFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn require(&self, key: &str) -> Result<&str, ConfigError> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| ConfigError::MissingKey(key.to_string()))
    }

    fn non_empty(&self, key: &str) -> Result<&str, ConfigError> {
        match self.require(key)? {
            "" => Err(ConfigError::Invalid {
                key: key.into(),
                reason: "must not be empty".into(),
            }),
            v => Ok(v),
        }
    }

    fn millis(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v.parse::<u64>().ok().filter(|&n| n > 0).ok_or_else(|| ConfigError::Invalid {
                key: key.into(),
                reason: format!("`{v}` is not a positive number of milliseconds"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeConfig {
    pub node_id: String,
    pub site_id: String,
    pub listen: String,
    /// Address announced to the VO; defaults to the bound listen address.
    pub advertise: Option<String>,
    pub central: String,
    pub data_dir: PathBuf,
    pub node_secret: String,
    pub central_secret: String,
    /// Admin credential presented when registering.
    pub token: String,
    pub heartbeat_interval_ms: u64,
    pub query_timeout_ms: u64,
}

impl NodeConfig {
    pub fn from_file(f: &ConfigFile) -> Result<Self, ConfigError> {
        Ok(Self {
            node_id: f.non_empty("node_id")?.into(),
            site_id: f.non_empty("site_id")?.into(),
            listen: f.non_empty("listen")?.into(),
            advertise: f.values.get("advertise").cloned(),
            central: f.non_empty("central")?.into(),
            data_dir: f.non_empty("data_dir")?.into(),
            node_secret: f.non_empty("node_secret")?.into(),
            central_secret: f.non_empty("central_secret")?.into(),
            token: f.non_empty("token")?.into(),
            heartbeat_interval_ms: f.millis("heartbeat_interval", DEFAULT_HEARTBEAT_MS)?,
            query_timeout_ms: f.millis("query_timeout", DEFAULT_QUERY_TIMEOUT_MS)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CentralConfig {
    pub listen: String,
    pub central_secret: String,
    pub heartbeat_interval_ms: u64,
}

impl CentralConfig {
    pub fn from_file(f: &ConfigFile) -> Result<Self, ConfigError> {
        Ok(Self {
            listen: f.non_empty("listen")?.into(),
            central_secret: f.non_empty("central_secret")?.into(),
            heartbeat_interval_ms: f.millis("heartbeat_interval", DEFAULT_HEARTBEAT_MS)?,
        })
    }
}

pub fn load_node_config(path: &Path) -> Result<NodeConfig, ConfigError> {
    NodeConfig::from_file(&ConfigFile::load(path)?)
}

pub fn load_central_config(path: &Path) -> Result<CentralConfig, ConfigError> {
    CentralConfig::from_file(&ConfigFile::load(path)?)
}
