use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use terrabyte_core::BackoffPolicy;

/// Environment variable naming the config file.
pub const CONFIG_ENV: &str = "TBC_CONFIG";
/// Environment variable overriding the configured server URL.
pub const SERVER_URL_ENV: &str = "TBC_SERVER_URL";

/// Which certificates the client accepts from the server.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum TlsTrust {
    /// The platform's trust store.
    #[default]
    System,
    /// Only the certificates in this PEM file.
    Pem(PathBuf),
}

impl From<String> for TlsTrust {
    fn from(s: String) -> Self {
        if s == "system" {
            TlsTrust::System
        } else {
            TlsTrust::Pem(PathBuf::from(s))
        }
    }
}

impl From<TlsTrust> for String {
    fn from(t: TlsTrust) -> Self {
        match t {
            TlsTrust::System => "system".into(),
            TlsTrust::Pem(p) => p.to_string_lossy().into_owned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub server_url: String,
    #[serde(default)]
    pub username: String,
    #[serde(default)]
    pub password: String,
    pub sample_path: PathBuf,
    pub download_path: PathBuf,
    #[serde(default)]
    pub backoff: BackoffPolicy,
    #[serde(default = "default_max_tries")]
    pub max_tries: u32,
    #[serde(default)]
    pub tls_trust: TlsTrust,
}

fn default_max_tries() -> u32 {
    25
}

impl Default for ClientConfig {
    fn default() -> Self {
        let base = dirs::download_dir().unwrap_or_else(|| PathBuf::from("."));
        ClientConfig {
            server_url: "https://127.0.0.1:8443".into(),
            username: String::new(),
            password: String::new(),
            sample_path: base.join("terrabyte-samples"),
            download_path: base.join("terrabyte"),
            backoff: BackoffPolicy::default(),
            max_tries: default_max_tries(),
            tls_trust: TlsTrust::System,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("no config location: set {CONFIG_ENV}")]
    NoLocation,
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl ClientConfig {
    /// `$TBC_CONFIG` if set, else `<config dir>/terrabyte/client.json`.
    pub fn default_path(env: impl Fn(&str) -> Option<String>) -> Result<PathBuf, ConfigError> {
        if let Some(p) = env(CONFIG_ENV).filter(|p| !p.is_empty()) {
            return Ok(PathBuf::from(p));
        }
        dirs::config_dir().map(|d| d.join("terrabyte").join("client.json")).ok_or(ConfigError::NoLocation)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })
    }

    /// Loads the file, or returns defaults when it does not exist yet.
    pub fn load_or_default(path: &Path) -> Result<Self, ConfigError> {
        match Self::load(path) {
            Err(ConfigError::Io { source, .. }) if source.kind() == io::ErrorKind::NotFound => Ok(Self::default()),
            other => other,
        }
    }

    /// Writes the config readable by the owner only, replacing any
    /// previous file atomically.
    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let io_err = |source| ConfigError::Io { path: path.into(), source };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err)?;
        }
        let tmp = path.with_extension("json.tmp");
        let _ = fs::remove_file(&tmp);
        let mut opts = fs::OpenOptions::new();
        opts.write(true).create_new(true);
        #[cfg(unix)]
        std::os::unix::fs::OpenOptionsExt::mode(&mut opts, 0o600);
        let mut f = opts.open(&tmp).map_err(io_err)?;
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        f.write_all(text.as_bytes()).and_then(|_| f.write_all(b"\n")).and_then(|_| f.sync_all()).map_err(io_err)?;
        fs::rename(&tmp, path).map_err(io_err)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.backoff.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.max_tries == 0 {
            return Err(ConfigError::Invalid("max_tries must be at least 1".into()));
        }
        if !self.server_url.starts_with("https://") {
            return Err(ConfigError::Invalid("server_url must use https".into()));
        }
        Ok(())
    }
}
