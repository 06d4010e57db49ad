//! Server configuration and backend selection.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use workbench_core::engine::EngineConfig;
use workbench_core::model::{load_script, Dialect, ModelBackend, ModelError, RoutedBackend, WireBackend, WireConfig};
use workbench_core::tools::{Toolbox, ToolsConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("backend: {0}")]
    Backend(#[from] ModelError),
    #[error("tools: {0}")]
    Tools(String),
}

/// Which model backend new projects get. Exactly one variant is selected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    /// Real endpoint; `MODEL_ENDPOINT` and `MODEL_API_KEY` fill in what the
    /// file leaves out.
    Wire {
        #[serde(default)]
        endpoint: Option<String>,
        #[serde(default)]
        dialect: Option<Dialect>,
        #[serde(default)]
        model: Option<String>,
    },
    /// Replays a `.fixture.json`; each project gets a fresh cursor.
    Scripted { fixture: PathBuf },
}

impl BackendConfig {
    /// Parses a command-line spec: `scripted:<fixture>`, `wire` or `wire:<dialect>`.
    pub fn from_spec(spec: &str) -> Result<Self, ConfigError> {
        match spec.split_once(':') {
            Some(("scripted", path)) if !path.is_empty() => Ok(Self::Scripted { fixture: path.into() }),
            Some(("wire", dialect)) => Ok(Self::Wire {
                endpoint: None,
                dialect: Some(dialect.parse()?),
                model: None,
            }),
            None if spec == "wire" => Ok(Self::Wire {
                endpoint: None,
                dialect: None,
                model: None,
            }),
            _ => Err(ConfigError::Invalid(format!(
                "backend spec {spec:?}: expected scripted:<fixture>, wire or wire:<dialect>"
            ))),
        }
    }

    /// Makes relative fixture paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let Self::Scripted { fixture } = self {
            if fixture.is_relative() {
                *fixture = base.join(&*fixture);
            }
        }
    }

    /// Instantiates a backend for one project.
    pub fn build(&self) -> Result<Arc<dyn ModelBackend>, ConfigError> {
        match self {
            Self::Scripted { fixture } => {
                let bytes = std::fs::read(fixture).map_err(|source| ConfigError::Read {
                    path: fixture.clone(),
                    source,
                })?;
                Ok(Arc::new(load_script(&bytes)?))
            }
            Self::Wire {
                endpoint,
                dialect,
                model,
            } => {
                let mut config = match endpoint {
                    Some(e) => WireConfig {
                        endpoint: e.clone(),
                        api_key: std::env::var("MODEL_API_KEY").ok(),
                        ..WireConfig::default()
                    },
                    None => WireConfig::from_env()?,
                };
                if let Some(d) = dialect {
                    config.dialect = *d;
                }
                if let Some(m) = model {
                    config.model = m.clone();
                }
                Ok(Arc::new(WireBackend::new(config)?))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Directory holding one sub-directory per project.
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    pub backend: BackendConfig,
    /// Backends for particular roles (`reviewer`, `project_coordinator`, ...)
    /// or profile bindings; everything else uses `backend`.
    #[serde(default)]
    pub roles: BTreeMap<String, BackendConfig>,
    /// Sandbox limits, fetch policy and optional tool fixture.
    #[serde(default)]
    pub tools: ToolsConfig,
    /// Review defaults, scheduling budgets and clock.
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub cors_origins: Vec<String>,
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_data_dir() -> PathBuf {
    "projects".into()
}

impl ApiConfig {
    pub fn new(backend: BackendConfig, data_dir: impl Into<PathBuf>) -> Self {
        Self {
            listen: default_listen(),
            data_dir: data_dir.into(),
            backend,
            roles: BTreeMap::new(),
            tools: ToolsConfig::default(),
            engine: EngineConfig::default(),
            cors_origins: Vec::new(),
        }
    }

    /// Reads a JSON config; relative paths are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let bytes = std::fs::read(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: ApiConfig = serde_json::from_slice(&bytes).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.backend.resolve_paths(base);
        for b in config.roles.values_mut() {
            b.resolve_paths(base);
        }
        if config.data_dir.is_relative() {
            config.data_dir = base.join(&config.data_dir);
        }
        if let Some(f) = &config.tools.fixture {
            if f.is_relative() {
                config.tools.fixture = Some(base.join(f));
            }
        }
        Ok(config)
    }

    /// Instantiates the model backend for one project.
    pub fn model(&self) -> Result<Arc<dyn ModelBackend>, ConfigError> {
        let default = self.backend.build()?;
        if self.roles.is_empty() {
            return Ok(default);
        }
        let mut routed = RoutedBackend::new(default);
        for (key, b) in &self.roles {
            routed = routed.route(key.clone(), b.build()?);
        }
        Ok(Arc::new(routed))
    }

    pub fn toolbox(&self) -> Result<Arc<Toolbox>, ConfigError> {
        Toolbox::from_config(&self.tools)
            .map(Arc::new)
            .map_err(|e| ConfigError::Tools(e.to_string()))
    }
}
