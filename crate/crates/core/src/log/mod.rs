//! Durable, partitioned, replayable append-only log.
//!
//! Layout on disk is `<root>/<topic>/<partition>/segment.dat` plus
//! `segment.idx`. A topic with one partition stands in for a broker that
//! cannot split a stream for parallel consumption.

mod segment;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::model::{Millis, StreamOffset};
use crate::partition::partition_for;
use segment::PartitionLog;

pub use segment::{GROUP_SYNC_INTERVAL, GROUP_SYNC_RECORDS};

#[derive(Debug, Error)]
pub enum LogError {
    #[error("topic {0:?} already exists")]
    DuplicateTopic(String),
    #[error("topic {0:?} does not exist")]
    UnknownTopic(String),
    #[error("invalid topic name {0:?}")]
    InvalidTopicName(String),
    #[error("a topic needs at least one partition")]
    NoPartitions,
    #[error("partition {partition} out of range for topic with {partitions} partitions")]
    PartitionOutOfRange { partition: u32, partitions: u32 },
    #[error("key routes to partition {expected}, not {actual}")]
    Misrouted { expected: u32, actual: u32 },
    #[error("corrupt record at offset {offset} in {path}")]
    Corrupt { path: PathBuf, offset: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A positioned entry of one partition. Immutable once appended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub offset: u64,
    pub key: Vec<u8>,
    pub payload: Vec<u8>,
    pub append_time: Millis,
}

#[derive(Debug, Clone, Copy)]
pub struct LogOptions {
    /// Group-fsync appended data (see [`GROUP_SYNC_RECORDS`] and
    /// [`GROUP_SYNC_INTERVAL`]). Appended data always reaches the OS before
    /// `append` returns.
    pub fsync: bool,
}

impl Default for LogOptions {
    fn default() -> Self {
        Self { fsync: true }
    }
}

/// Root directory holding any number of topics.
#[derive(Debug, Clone)]
pub struct Log {
    root: PathBuf,
    options: LogOptions,
}

fn validate_topic_name(name: &str) -> Result<(), LogError> {
    let ok = !name.is_empty()
        && name != "."
        && name != ".."
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(LogError::InvalidTopicName(name.to_owned()))
    }
}

impl Log {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, LogError> {
        Self::with_options(root, LogOptions::default())
    }

    pub fn with_options(root: impl Into<PathBuf>, options: LogOptions) -> Result<Self, LogError> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self { root, options })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn create_topic(&self, name: &str, partitions: u32) -> Result<Arc<Topic>, LogError> {
        validate_topic_name(name)?;
        if partitions == 0 {
            return Err(LogError::NoPartitions);
        }
        let dir = self.root.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(LogError::DuplicateTopic(name.to_owned()))
            }
            Err(e) => return Err(e.into()),
        }
        let parts = (0..partitions)
            .map(|p| PartitionLog::create(&dir.join(p.to_string()), self.options.fsync))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Arc::new(Topic {
            name: name.to_owned(),
            dir,
            partitions: parts,
        }))
    }

    /// Opens an existing topic, truncating torn tails left by a crash.
    pub fn open_topic(&self, name: &str) -> Result<Arc<Topic>, LogError> {
        validate_topic_name(name)?;
        let dir = self.root.join(name);
        if !dir.is_dir() {
            return Err(LogError::UnknownTopic(name.to_owned()));
        }
        let mut parts = Vec::new();
        while dir.join(parts.len().to_string()).is_dir() {
            parts.push(PartitionLog::open(
                &dir.join(parts.len().to_string()),
                self.options.fsync,
            )?);
        }
        if parts.is_empty() {
            return Err(LogError::NoPartitions);
        }
        Ok(Arc::new(Topic {
            name: name.to_owned(),
            dir,
            partitions: parts,
        }))
    }

    pub fn open_or_create_topic(
        &self,
        name: &str,
        partitions: u32,
    ) -> Result<Arc<Topic>, LogError> {
        match self.create_topic(name, partitions) {
            Err(LogError::DuplicateTopic(_)) => self.open_topic(name),
            other => other,
        }
    }
}

/// A named stream split into a fixed number of partitions.
///
/// Appends to one partition are serialized; reads never wait for more than
/// the copy of a few index entries.
pub struct Topic {
    name: String,
    dir: PathBuf,
    partitions: Vec<PartitionLog>,
}

impl std::fmt::Debug for Topic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Topic")
            .field("name", &self.name)
            .field("partitions", &self.partitions.len())
            .finish()
    }
}

impl Topic {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn partitions(&self) -> u32 {
        self.partitions.len() as u32
    }

    fn partition(&self, partition: u32) -> Result<&PartitionLog, LogError> {
        self.partitions
            .get(partition as usize)
            .ok_or(LogError::PartitionOutOfRange {
                partition,
                partitions: self.partitions(),
            })
    }

    /// Appends to the partition `key` routes to.
    pub fn append(&self, key: &[u8], payload: &[u8]) -> Result<StreamOffset, LogError> {
        let partition = partition_for(key, self.partitions());
        let offset = self.partitions[partition as usize].append_batch([(key, payload)])?;
        Ok(StreamOffset::new(&self.name, partition, offset))
    }

    /// Appends several records to one partition in a single write. Every key
    /// must route to `partition`. Returns the offset of the first record.
    pub fn append_batch<K, P>(&self, partition: u32, records: &[(K, P)]) -> Result<u64, LogError>
    where
        K: AsRef<[u8]>,
        P: AsRef<[u8]>,
    {
        let part = self.partition(partition)?;
        for (key, _) in records {
            let expected = partition_for(key.as_ref(), self.partitions());
            if expected != partition {
                return Err(LogError::Misrouted {
                    expected,
                    actual: partition,
                });
            }
        }
        part.append_batch(records.iter().map(|(k, p)| (k.as_ref(), p.as_ref())))
    }

    /// Up to `max` records starting at offset `from`. Reading at or beyond
    /// the end offset returns an empty list.
    pub fn read(&self, partition: u32, from: u64, max: usize) -> Result<Vec<LogRecord>, LogError> {
        self.partition(partition)?.read(from, max)
    }

    /// The offset the next append to `partition` will receive.
    pub fn end_offset(&self, partition: u32) -> Result<u64, LogError> {
        Ok(self.partition(partition)?.end_offset())
    }

    pub fn total_records(&self) -> u64 {
        self.partitions.iter().map(PartitionLog::end_offset).sum()
    }

    /// Forces all appended data to stable storage.
    pub fn sync(&self) -> Result<(), LogError> {
        self.partitions.iter().try_for_each(PartitionLog::sync)
    }
}

impl Drop for Topic {
    fn drop(&mut self) {
        if let Err(e) = self.sync() {
            log::warn!("final sync of topic {} failed: {e}", self.name);
        }
    }
}
