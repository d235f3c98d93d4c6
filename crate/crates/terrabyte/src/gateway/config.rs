use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use terrabyte_core::PartitionPolicy;

use super::auth::{RateLimit, UserEntry, UserStore};
use super::GatewayError;
use crate::objectstore::LatencyModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum TlsConfig {
    /// PEM certificate chain and private key on disk.
    Files { cert_path: PathBuf, key_path: PathBuf },
    /// A throwaway certificate made at startup, optionally written out so
    /// clients can be told to trust it.
    SelfSigned {
        #[serde(default = "default_hostnames")]
        hostnames: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        write_cert_to: Option<PathBuf>,
    },
}

fn default_hostnames() -> Vec<String> {
    vec!["localhost".into(), "127.0.0.1".into()]
}

impl Default for TlsConfig {
    fn default() -> Self {
        TlsConfig::SelfSigned { hostnames: default_hostnames(), write_cert_to: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrecompiledEntry {
    pub id: String,
    pub name: String,
    pub archive: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    #[serde(default = "default_listen")]
    pub listen: SocketAddr,
    #[serde(default)]
    pub tls: TlsConfig,
    pub users: Vec<UserEntry>,
    #[serde(default)]
    pub rate_limit: RateLimit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed_origin: Option<String>,
    pub catalog_snapshot: PathBuf,
    pub store_root: PathBuf,
    #[serde(default)]
    pub latency: LatencyModel,
    #[serde(default)]
    pub partition: PartitionPolicy,
    pub staging_dir: PathBuf,
    #[serde(default = "default_budget")]
    pub staging_budget: u64,
    #[serde(default = "default_ttl")]
    pub job_ttl_secs: u64,
    #[serde(default = "default_max_jobs")]
    pub max_live_jobs: usize,
    #[serde(default = "default_sample_size")]
    pub sample_size: usize,
    #[serde(default)]
    pub precompiled: Vec<PrecompiledEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ui_dir: Option<PathBuf>,
}

fn default_listen() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 8443))
}

fn default_budget() -> u64 {
    4 * 1024 * 1024 * 1024
}

fn default_ttl() -> u64 {
    24 * 60 * 60
}

fn default_max_jobs() -> usize {
    64
}

fn default_sample_size() -> usize {
    20
}

impl GatewayConfig {
    /// A config with defaults for everything except the paths and users.
    pub fn new(catalog_snapshot: PathBuf, store_root: PathBuf, staging_dir: PathBuf, users: Vec<UserEntry>) -> Self {
        GatewayConfig {
            listen: default_listen(),
            tls: TlsConfig::default(),
            users,
            rate_limit: RateLimit::default(),
            allowed_origin: None,
            catalog_snapshot,
            store_root,
            latency: LatencyModel::default(),
            partition: PartitionPolicy::default(),
            staging_dir,
            staging_budget: default_budget(),
            job_ttl_secs: default_ttl(),
            max_live_jobs: default_max_jobs(),
            sample_size: default_sample_size(),
            precompiled: Vec::new(),
            ui_dir: None,
        }
    }

    /// Reads a JSON config. Relative paths are taken relative to the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        let mut config: GatewayConfig =
            serde_json::from_str(&text).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            config.resolve_relative(base);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.catalog_snapshot);
        fix(&mut self.store_root);
        fix(&mut self.staging_dir);
        if let Some(ui) = &mut self.ui_dir {
            fix(ui);
        }
        for p in &mut self.precompiled {
            fix(&mut p.archive);
        }
        match &mut self.tls {
            TlsConfig::Files { cert_path, key_path } => {
                fix(cert_path);
                fix(key_path);
            }
            TlsConfig::SelfSigned { write_cert_to: Some(p), .. } => fix(p),
            TlsConfig::SelfSigned { .. } => {}
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::Config(m.to_owned()));
        if self.users.is_empty() {
            return bad("at least one user must be configured");
        }
        UserStore::new(&self.users).map_err(|e| GatewayError::Config(e.to_string()))?;
        if self.staging_budget == 0 {
            return bad("staging_budget must be positive");
        }
        if self.max_live_jobs == 0 {
            return bad("max_live_jobs must be positive");
        }
        if self.sample_size == 0 {
            return bad("sample_size must be positive");
        }
        if self.job_ttl_secs == 0 {
            return bad("job_ttl_secs must be positive");
        }
        if !(self.rate_limit.failed_auth_per_sec >= 0.0) || self.rate_limit.burst == 0 {
            return bad("rate_limit needs a non-negative rate and a burst of at least 1");
        }
        self.partition.validate().map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(())
    }
}
