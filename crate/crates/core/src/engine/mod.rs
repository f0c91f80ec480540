//! Per-partition enrichment workers.
//!
//! Each worker owns one partition of the measurement and update topics. It
//! merges the two streams, keeps the two newest versions of every attribute
//! it has seen in [`LocalAttributeState`], writes results through a
//! deduplicating [`DedupSink`] and checkpoints its input offsets. After a
//! crash the [`Engine`] supervisor recovers the worker from its last
//! checkpoint and replays the input from there.

mod checkpoint;
mod config;
mod sink;
mod state;
mod supervisor;
mod worker;

use thiserror::Error;

use crate::log::{LogError, Topic};
use crate::store::StoreError;
use crate::wire::WireError;

pub use checkpoint::{Checkpoint, CheckpointDir, RETAINED_CHECKPOINTS};
pub use config::{
    ConfigError, EngineConfig, MissingPolicy, TopicNames, DEFAULT_BATCH_SIZE,
    DEFAULT_CHECKPOINT_INTERVAL_MS,
};
pub use sink::{DedupSink, Emit, SinkStats};
pub use state::{apply_update, enrich, CacheChange, CachedVersions, Enrichment, LocalAttributeState};
pub use supervisor::{Engine, WorkerReport, MAX_RESTARTS};
pub use worker::{
    EngineContext, EngineTopics, KillPoint, PartitionWorker, WorkerControl, WorkerStats,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] std::io::Error),
    #[error("undecodable record at {topic}/{partition}@{offset}: {source}")]
    Decode {
        topic: String,
        partition: u32,
        offset: u64,
        source: WireError,
    },
    #[error("topic {topic} has {actual} partitions, expected {expected}")]
    PartitionMismatch {
        topic: String,
        actual: u32,
        expected: u32,
    },
    #[error("injected crash at measurement offset {measurement_offset}")]
    Killed { measurement_offset: u64 },
    #[error("stopped while the attribute store was unreachable")]
    Interrupted,
    #[error("could not spawn worker thread: {0}")]
    Spawn(std::io::Error),
    #[error("worker thread panicked")]
    Panicked,
}

impl EngineError {
    pub(crate) fn decode(topic: &Topic, partition: u32, offset: u64, source: WireError) -> Self {
        EngineError::Decode {
            topic: topic.name().to_owned(),
            partition,
            offset,
            source,
        }
    }
}
