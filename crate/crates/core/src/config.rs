//! TOML platform configuration and the wiring of log, store and engine.
//!
//! ```toml
//! [engine]
//! partitions = 4
//! attributes = ["geolocation", "unit"]
//! checkpoint_interval_ms = 10000
//! missing_policy = "dead_letter"
//! checkpoint_dir = "checkpoints"
//!
//! [engine.topics]
//! measurements = "measurements"
//!
//! [store]
//! journal_path = "store.journal"
//! simulated_latency_ms = 1
//!
//! [log]
//! root = "log"
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{ConfigError, EngineConfig, EngineContext, EngineError, EngineTopics};
use crate::log::{Log, LogError, LogOptions};
use crate::store::{AttributeStore, RemoteStore, StoreError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreConfig {
    /// Journal file; `None` keeps the store in memory only.
    pub journal_path: Option<PathBuf>,
    pub simulated_latency_ms: u64,
    pub fsync: bool,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            journal_path: None,
            simulated_latency_ms: 1,
            fsync: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogConfig {
    pub root: PathBuf,
    pub fsync: bool,
}

impl Default for LogConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("log"),
            fsync: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlatformConfig {
    pub engine: EngineConfig,
    pub store: StoreConfig,
    pub log: LogConfig,
}

#[derive(Debug, Error)]
pub enum PlatformError {
    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: PathBuf,
        source: Box<toml::de::Error>,
    },
    #[error(transparent)]
    Invalid(#[from] ConfigError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

impl PlatformConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Reads, validates and resolves a config file.
    pub fn load(path: &Path) -> Result<Self, PlatformError> {
        let text = std::fs::read_to_string(path).map_err(|source| PlatformError::Read {
            path: path.to_owned(),
            source,
        })?;
        let mut config = Self::from_toml(&text).map_err(|source| PlatformError::Parse {
            path: path.to_owned(),
            source: Box::new(source),
        })?;
        config.engine.validate()?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    /// Makes relative paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.engine.checkpoint_dir);
        fix(&mut self.log.root);
        if let Some(j) = &mut self.store.journal_path {
            fix(j);
        }
    }

    /// A config with every path under `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        let mut c = Self::default();
        c.store.journal_path = Some(PathBuf::from("store.journal"));
        c.engine.checkpoint_dir = PathBuf::from("checkpoints");
        c.resolve_paths(dir);
        c
    }
}

/// Opened log, topics and store for one config.
#[derive(Debug, Clone)]
pub struct Platform {
    pub config: PlatformConfig,
    pub log: Log,
    pub store: Arc<AttributeStore>,
    pub context: EngineContext,
}

impl Platform {
    pub fn open(config: PlatformConfig) -> Result<Self, PlatformError> {
        config.engine.validate()?;
        let log = Log::with_options(
            &config.log.root,
            LogOptions {
                fsync: config.log.fsync,
            },
        )?;
        let store = Arc::new(match &config.store.journal_path {
            Some(p) => AttributeStore::open(p, config.store.fsync)?,
            None => AttributeStore::in_memory(),
        });
        let topics = EngineTopics::open_or_create(&log, &config.engine)?;
        let context = EngineContext {
            config: Arc::new(config.engine.clone()),
            topics,
            store: RemoteStore::new(
                store.clone(),
                Duration::from_millis(config.store.simulated_latency_ms),
            ),
        };
        Ok(Self {
            config,
            log,
            store,
            context,
        })
    }
}
