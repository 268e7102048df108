//! Service configuration.
//!
//! ```toml
//! data_dir = "/var/lib/stratus"
//! catalog_path = "catalog.toml"        # shipped fixture catalog when absent
//! governance_path = "governance.toml"  # <data_dir>/governance.toml when absent
//! worker_limit = 4
//! local_timeout_seconds = 3600
//! sim_time_scale = 0.0                 # real seconds slept per simulated second
//!
//! [sim]                                # shipped calibration when absent
//! t_serial_hours = 7.31
//! serial_fraction = 0.063
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stratus_core::backends::{SimParams, FIXTURE_CALIBRATION};
use stratus_core::catalog::{fixture_catalog, load_catalog_file, CatalogSnapshot};
use stratus_core::governance::{
    AclEntry, Action, BudgetDecl, GovernanceConfig, Group, ResourceKind, ResourceRef, Workspace,
};
use stratus_core::Money;

/// Environment variable holding the service address (`host:port`).
pub const ADDR_ENV: &str = "STRATUS_ADDR";
pub const DEFAULT_ADDR: &str = "127.0.0.1:8470";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catalog_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub governance_path: Option<PathBuf>,
    #[serde(default = "default_workers")]
    pub worker_limit: usize,
    #[serde(default = "default_timeout")]
    pub local_timeout_seconds: u64,
    #[serde(default)]
    pub sim_time_scale: f64,
    #[serde(default = "shipped_sim")]
    pub sim: SimParams,
}

fn default_data_dir() -> PathBuf {
    PathBuf::from(".stratus")
}

fn default_workers() -> usize {
    4
}

fn default_timeout() -> u64 {
    3600
}

fn shipped_sim() -> SimParams {
    SimParams::from_toml(FIXTURE_CALIBRATION).expect("shipped calibration parses")
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            data_dir: default_data_dir(),
            catalog_path: None,
            governance_path: None,
            worker_limit: default_workers(),
            local_timeout_seconds: default_timeout(),
            sim_time_scale: 0.0,
            sim: shipped_sim(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Invalid(String),
}

impl GatewayConfig {
    pub fn with_data_dir(dir: impl Into<PathBuf>) -> Self {
        GatewayConfig {
            data_dir: dir.into(),
            ..Default::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: GatewayConfig =
            toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, resolving relative paths inside it against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.data_dir);
        cfg.catalog_path.as_mut().map(rebase);
        cfg.governance_path.as_mut().map(rebase);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.worker_limit == 0 {
            return Err(ConfigError::Invalid("worker_limit must be >= 1".into()));
        }
        if !(self.sim_time_scale.is_finite() && self.sim_time_scale >= 0.0) {
            return Err(ConfigError::Invalid("sim_time_scale must be >= 0".into()));
        }
        self.sim
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn catalog(&self) -> Result<CatalogSnapshot, ConfigError> {
        match &self.catalog_path {
            Some(p) => load_catalog_file(p)
                .map_err(|e| ConfigError::Invalid(format!("{}: {e}", p.display()))),
            None => Ok(fixture_catalog()),
        }
    }

    pub fn governance_file(&self) -> PathBuf {
        self.governance_path
            .clone()
            .unwrap_or_else(|| self.data_dir.join("governance.toml"))
    }

    /// Loads the governance document, writing a single-user bootstrap document
    /// for `owner` first if none exists.
    pub fn governance(&self, owner: &str) -> Result<GovernanceConfig, ConfigError> {
        let path = self.governance_file();
        if !path.exists() {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|source| ConfigError::Io {
                    path: dir.to_path_buf(),
                    source,
                })?;
            }
            std::fs::write(&path, bootstrap_governance(owner).to_toml()).map_err(|source| {
                ConfigError::Io {
                    path: path.clone(),
                    source,
                }
            })?;
        }
        let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io {
            path: path.clone(),
            source,
        })?;
        GovernanceConfig::from_toml(&text).map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

/// One workspace, one admin group holding everything, one $100 budget.
pub fn bootstrap_governance(owner: &str) -> GovernanceConfig {
    let all = |kind| AclEntry {
        resource: ResourceRef::new(kind, "*"),
        group: "admins".into(),
        actions: vec![Action::Admin],
    };
    GovernanceConfig {
        groups: vec![Group {
            id: "admins".into(),
            members: vec![owner.to_string()],
        }],
        workspaces: vec![Workspace {
            id: crate::cli::DEFAULT_WORKSPACE.into(),
            name: "Default workspace".into(),
            member_groups: vec!["admins".into()],
            budgets: vec!["default".into()],
            resources: Vec::new(),
            acl: vec![
                all(ResourceKind::Workflow),
                all(ResourceKind::Compute),
                all(ResourceKind::Dataset),
                all(ResourceKind::Environment),
                all(ResourceKind::JobResult),
            ],
        }],
        budgets: vec![BudgetDecl {
            id: "default".into(),
            allocation: Money::from_dollars(100),
        }],
    }
}

/// Address from `STRATUS_ADDR`, if set and non-empty.
pub fn addr_from_env() -> Option<String> {
    std::env::var(ADDR_ENV)
        .ok()
        .filter(|s| !s.trim().is_empty())
}
