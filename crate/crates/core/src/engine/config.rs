use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    /// Route the whole measurement to the dead-letter topic.
    #[default]
    DeadLetter,
    /// Emit the measurement with `missing` provenance on the absent attributes.
    EmitFlagged,
}

impl std::str::FromStr for MissingPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dead_letter" => Ok(Self::DeadLetter),
            "emit_flagged" => Ok(Self::EmitFlagged),
            other => Err(format!(
                "unknown missing policy {other:?} (expected dead_letter or emit_flagged)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TopicNames {
    pub measurements: String,
    pub updates: String,
    pub results: String,
    pub dead_letter: String,
}

impl Default for TopicNames {
    fn default() -> Self {
        Self {
            measurements: "measurements".into(),
            updates: "attribute-updates".into(),
            results: "enriched".into(),
            dead_letter: "dead-letter".into(),
        }
    }
}

pub const DEFAULT_CHECKPOINT_INTERVAL_MS: u64 = 10_000;
pub const DEFAULT_BATCH_SIZE: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Attribute names attached to every measurement, in output order.
    #[serde(rename = "attributes")]
    pub enrichment_attributes: Vec<String>,
    /// Number of partitions, and of parallel workers.
    pub partitions: u32,
    pub checkpoint_interval_ms: u64,
    /// Additionally checkpoint after this many consumed measurements.
    pub checkpoint_every_records: Option<u64>,
    pub missing_policy: MissingPolicy,
    /// Maximum measurements processed between two update drains.
    pub batch_size: usize,
    pub checkpoint_dir: PathBuf,
    pub topics: TopicNames,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            enrichment_attributes: vec!["geolocation".into(), "unit".into()],
            partitions: 4,
            checkpoint_interval_ms: DEFAULT_CHECKPOINT_INTERVAL_MS,
            checkpoint_every_records: None,
            missing_policy: MissingPolicy::default(),
            batch_size: DEFAULT_BATCH_SIZE,
            checkpoint_dir: PathBuf::from("checkpoints"),
            topics: TopicNames::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("at least one enrichment attribute is required")]
    NoAttributes,
    #[error("enrichment attribute {0:?} listed twice")]
    DuplicateAttribute(String),
    #[error("enrichment attribute names must not be empty")]
    EmptyAttribute,
    #[error("partition count must be positive")]
    NoPartitions,
    #[error("batch size must be positive")]
    EmptyBatch,
    #[error("topic names must be distinct")]
    TopicClash,
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.enrichment_attributes.is_empty() {
            return Err(ConfigError::NoAttributes);
        }
        for (i, a) in self.enrichment_attributes.iter().enumerate() {
            if a.is_empty() {
                return Err(ConfigError::EmptyAttribute);
            }
            if self.enrichment_attributes[..i].contains(a) {
                return Err(ConfigError::DuplicateAttribute(a.clone()));
            }
        }
        if self.partitions == 0 {
            return Err(ConfigError::NoPartitions);
        }
        if self.batch_size == 0 {
            return Err(ConfigError::EmptyBatch);
        }
        let t = &self.topics;
        let names = [&t.measurements, &t.updates, &t.results, &t.dead_letter];
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(ConfigError::TopicClash);
            }
        }
        Ok(())
    }
}
