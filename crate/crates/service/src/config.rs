use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub const PORT_ENV: &str = "CRFCHECK_PORT";
pub const DATA_DIR_ENV: &str = "CRFCHECK_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssistantEndpoint {
    /// Base URL; requests go to `{url}/adjudicate`.
    pub url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_host")]
    pub host: String,
    #[serde(default = "default_port")]
    pub port: u16,
    /// Holds the NDJSON stores and the audit log.
    pub data_dir: PathBuf,
    #[serde(default)]
    pub kb_path: Option<PathBuf>,
    #[serde(default)]
    pub template_dir: Option<PathBuf>,
    #[serde(default)]
    pub econ_params: Option<PathBuf>,
    #[serde(default)]
    pub assistant: Option<AssistantEndpoint>,
}

fn default_host() -> String {
    "127.0.0.1".into()
}

fn default_port() -> u16 {
    8080
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Read { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            host: default_host(),
            port: default_port(),
            data_dir: data_dir.into(),
            kb_path: None,
            template_dir: None,
            econ_params: None,
            assistant: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let read = |message: String| ConfigError::Read {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| read(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| read(e.to_string()))
    }

    /// Applies `CRFCHECK_PORT` and `CRFCHECK_DATA_DIR` from `env`.
    pub fn with_env(mut self, env: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        if let Some(port) = env(PORT_ENV) {
            self.port = port
                .parse()
                .map_err(|_| ConfigError::Invalid(format!("{PORT_ENV}={port} is not a port number")))?;
        }
        if let Some(dir) = env(DATA_DIR_ENV) {
            self.data_dir = dir.into();
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.data_dir.is_dir() {
            return Err(ConfigError::Invalid(format!(
                "data directory {} does not exist",
                self.data_dir.display()
            )));
        }
        for (name, path) in [
            ("kb_path", &self.kb_path),
            ("template_dir", &self.template_dir),
            ("econ_params", &self.econ_params),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(ConfigError::Invalid(format!("{name} {} does not exist", p.display())));
                }
            }
        }
        if let Some(a) = &self.assistant {
            if a.timeout_ms == 0 {
                return Err(ConfigError::Invalid("assistant timeout must be positive".into()));
            }
            if !(a.url.starts_with("http://") || a.url.starts_with("https://")) {
                return Err(ConfigError::Invalid(format!("assistant url {} is not http(s)", a.url)));
            }
        }
        Ok(())
    }
}
