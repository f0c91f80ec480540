//! Time-versioned attribute store.
//!
//! One process plays both remote roles an enrichment worker talks to: the
//! fast current-value store it re-reads on recovery and the historical
//! archive it falls back to for late measurements. Histories are ordered maps
//! over `valid_from`, persisted through an append-only journal of framed
//! [`AttributeUpdate`] records that is replayed at startup.
//!
//! Workers reach the store through [`RemoteStore`], which adds a fixed
//! simulated access latency to reads so that local-cache hits and remote
//! fallbacks have measurably different costs.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use thiserror::Error;

use crate::model::{AttributeKey, AttributeUpdate, AttributeVersion, Millis};
use crate::partition::partition_for_device;
use crate::wire::{Wire, WireError, WireReader};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{key} already has value {existing:?} at {valid_from}, refusing {proposed:?}")]
    Conflict {
        key: AttributeKey,
        valid_from: Millis,
        existing: String,
        proposed: String,
    },
    #[error("attribute store unavailable")]
    Unavailable,
    #[error("journal {path}: {source}")]
    Journal { path: PathBuf, source: WireError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl StoreError {
    /// Whether retrying the same call may succeed.
    pub fn is_transient(&self) -> bool {
        matches!(self, StoreError::Unavailable)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PutOutcome {
    Inserted,
    /// The identical version was already present.
    Unchanged,
}

struct Journal {
    file: File,
    fsync: bool,
}

#[derive(Default)]
pub struct AttributeStore {
    histories: RwLock<HashMap<AttributeKey, BTreeMap<Millis, String>>>,
    journal: Mutex<Option<Journal>>,
}

impl std::fmt::Debug for AttributeStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AttributeStore")
            .field("keys", &self.histories.read().len())
            .finish()
    }
}

impl AttributeStore {
    /// A store without persistence.
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens or creates the journal at `path` and replays it. A torn final
    /// record is truncated.
    pub fn open(path: impl AsRef<Path>, fsync: bool) -> Result<Self, StoreError> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)?;
        let data = std::fs::read(path)?;
        let mut histories: HashMap<AttributeKey, BTreeMap<Millis, String>> = HashMap::new();
        let mut reader = WireReader::new(&data);
        let mut good = 0;
        while reader.remaining() > 0 {
            match AttributeUpdate::read_framed(&mut reader) {
                Ok(u) => {
                    histories
                        .entry(u.key)
                        .or_default()
                        .insert(u.version.valid_from, u.version.value);
                    good = reader.position();
                }
                Err(WireError::Truncated { .. }) => break,
                Err(source) => {
                    return Err(StoreError::Journal {
                        path: path.to_path_buf(),
                        source,
                    })
                }
            }
        }
        if good < data.len() {
            log::warn!(
                "truncating {} torn bytes from journal {}",
                data.len() - good,
                path.display()
            );
            file.set_len(good as u64)?;
            file.flush()?;
        }
        Ok(Self {
            histories: RwLock::new(histories),
            journal: Mutex::new(Some(Journal { file, fsync })),
        })
    }

    /// Inserts `version` into the history of `key`.
    ///
    /// Re-inserting an identical version is a no-op; a different value at an
    /// existing `valid_from` is a conflict. The journal is written before the
    /// in-memory history changes.
    pub fn put_version(
        &self,
        key: &AttributeKey,
        version: &AttributeVersion,
    ) -> Result<PutOutcome, StoreError> {
        let mut histories = self.histories.write();
        if let Some(existing) = histories
            .get(key)
            .and_then(|h| h.get(&version.valid_from))
        {
            if *existing == version.value {
                return Ok(PutOutcome::Unchanged);
            }
            return Err(StoreError::Conflict {
                key: key.clone(),
                valid_from: version.valid_from,
                existing: existing.clone(),
                proposed: version.value.clone(),
            });
        }
        if let Some(journal) = self.journal.lock().as_mut() {
            let record = AttributeUpdate {
                key: key.clone(),
                version: version.clone(),
            };
            journal.file.write_all(&record.encode())?;
            if journal.fsync {
                journal.file.sync_data()?;
            }
        }
        histories
            .entry(key.clone())
            .or_default()
            .insert(version.valid_from, version.value.clone());
        Ok(PutOutcome::Inserted)
    }

    /// The version with the greatest `valid_from <= t`.
    pub fn get_at(&self, key: &AttributeKey, t: Millis) -> Option<AttributeVersion> {
        let histories = self.histories.read();
        let (valid_from, value) = histories.get(key)?.range(..=t).next_back()?;
        Some(AttributeVersion {
            valid_from: *valid_from,
            value: value.clone(),
        })
    }

    /// The newest and second-newest versions of `key`.
    pub fn get_latest_two(
        &self,
        key: &AttributeKey,
    ) -> (Option<AttributeVersion>, Option<AttributeVersion>) {
        let histories = self.histories.read();
        let Some(h) = histories.get(key) else {
            return (None, None);
        };
        let mut newest = h.iter().rev().map(|(t, v)| AttributeVersion {
            valid_from: *t,
            value: v.clone(),
        });
        (newest.next(), newest.next())
    }

    /// All keys whose device routes to `partition`, in lexicographic order.
    pub fn scan_keys(&self, partition: u32, partitions: u32) -> Vec<AttributeKey> {
        let mut keys: Vec<_> = self
            .histories
            .read()
            .keys()
            .filter(|k| partition_for_device(&k.device, partitions) == partition)
            .cloned()
            .collect();
        keys.sort();
        keys
    }

    /// The full history of `key` in ascending `valid_from` order.
    pub fn history(&self, key: &AttributeKey) -> Vec<AttributeVersion> {
        self.histories
            .read()
            .get(key)
            .map(|h| {
                h.iter()
                    .map(|(t, v)| AttributeVersion {
                        valid_from: *t,
                        value: v.clone(),
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn key_count(&self) -> usize {
        self.histories.read().len()
    }
}

/// Counters of remote reads, used by benchmarks and tests.
#[derive(Debug, Default)]
pub struct RemoteStats {
    pub get_at: AtomicU64,
    pub get_latest_two: AtomicU64,
    pub scan_keys: AtomicU64,
}

/// A worker's handle on the shared store.
///
/// Reads sleep for the configured latency first. The handle can be switched
/// unavailable, or made to fail a number of upcoming calls, to exercise the
/// retry paths of its callers.
#[derive(Clone)]
pub struct RemoteStore {
    store: Arc<AttributeStore>,
    latency: Duration,
    available: Arc<AtomicBool>,
    fail_next: Arc<AtomicU64>,
    stats: Arc<RemoteStats>,
}

impl std::fmt::Debug for RemoteStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteStore")
            .field("latency", &self.latency)
            .finish()
    }
}

impl RemoteStore {
    pub fn new(store: Arc<AttributeStore>, latency: Duration) -> Self {
        Self {
            store,
            latency,
            available: Arc::new(AtomicBool::new(true)),
            fail_next: Arc::new(AtomicU64::new(0)),
            stats: Arc::new(RemoteStats::default()),
        }
    }

    pub fn store(&self) -> &Arc<AttributeStore> {
        &self.store
    }

    pub fn latency(&self) -> Duration {
        self.latency
    }

    pub fn stats(&self) -> &RemoteStats {
        &self.stats
    }

    pub fn set_available(&self, available: bool) {
        self.available.store(available, Ordering::SeqCst);
    }

    /// Makes the next `n` calls fail with [`StoreError::Unavailable`].
    pub fn fail_next(&self, n: u64) {
        self.fail_next.store(n, Ordering::SeqCst);
    }

    fn reach(&self) -> Result<(), StoreError> {
        if !self.available.load(Ordering::SeqCst) {
            return Err(StoreError::Unavailable);
        }
        let consumed = self
            .fail_next
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1));
        if consumed.is_ok() {
            return Err(StoreError::Unavailable);
        }
        Ok(())
    }

    fn delay(&self) {
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
    }

    pub fn put_version(
        &self,
        key: &AttributeKey,
        version: &AttributeVersion,
    ) -> Result<PutOutcome, StoreError> {
        self.reach()?;
        self.store.put_version(key, version)
    }

    pub fn get_at(
        &self,
        key: &AttributeKey,
        t: Millis,
    ) -> Result<Option<AttributeVersion>, StoreError> {
        self.reach()?;
        self.delay();
        self.stats.get_at.fetch_add(1, Ordering::Relaxed);
        Ok(self.store.get_at(key, t))
    }

    pub fn get_latest_two(
        &self,
        key: &AttributeKey,
    ) -> Result<(Option<AttributeVersion>, Option<AttributeVersion>), StoreError> {
        self.reach()?;
        self.delay();
        self.stats.get_latest_two.fetch_add(1, Ordering::Relaxed);
        Ok(self.store.get_latest_two(key))
    }

    pub fn scan_keys(&self, partition: u32, partitions: u32) -> Result<Vec<AttributeKey>, StoreError> {
        self.reach()?;
        self.delay();
        self.stats.scan_keys.fetch_add(1, Ordering::Relaxed);
        Ok(self.store.scan_keys(partition, partitions))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DeviceId;

    fn key(dev: &str, attr: &str) -> AttributeKey {
        AttributeKey::new(DeviceId::new(dev).unwrap(), attr).unwrap()
    }

    fn v(t: Millis, s: &str) -> AttributeVersion {
        AttributeVersion::new(t, s).unwrap()
    }

    #[test]
    fn put_is_idempotent_and_rejects_conflicts() {
        let s = AttributeStore::in_memory();
        let k = key("d", "unit");
        assert_eq!(s.put_version(&k, &v(100, "A")).unwrap(), PutOutcome::Inserted);
        assert_eq!(s.history(&k), [v(100, "A")]);
        assert_eq!(s.put_version(&k, &v(100, "A")).unwrap(), PutOutcome::Unchanged);
        assert_eq!(s.history(&k), [v(100, "A")]);
        assert!(matches!(
            s.put_version(&k, &v(100, "B")),
            Err(StoreError::Conflict { .. })
        ));
        assert_eq!(s.history(&k), [v(100, "A")]);
    }

    #[test]
    fn get_at_is_inclusive_point_in_time() {
        let s = AttributeStore::in_memory();
        let k = key("d", "unit");
        s.put_version(&k, &v(200, "B")).unwrap();
        s.put_version(&k, &v(100, "A")).unwrap();
        assert_eq!(s.get_at(&k, 150), Some(v(100, "A")));
        assert_eq!(s.get_at(&k, 200), Some(v(200, "B")));
        assert_eq!(s.get_at(&k, 99), None);
        assert_eq!(s.get_at(&key("other", "unit"), 1_000), None);
    }

    #[test]
    fn latest_two() {
        let s = AttributeStore::in_memory();
        let k = key("d", "unit");
        assert_eq!(s.get_latest_two(&k), (None, None));
        s.put_version(&k, &v(100, "A")).unwrap();
        assert_eq!(s.get_latest_two(&k), (Some(v(100, "A")), None));
        s.put_version(&k, &v(300, "C")).unwrap();
        s.put_version(&k, &v(200, "B")).unwrap();
        assert_eq!(s.get_latest_two(&k), (Some(v(300, "C")), Some(v(200, "B"))));
        assert_eq!(s.get_latest_two(&k).0, s.get_at(&k, Millis::MAX));
    }

    #[test]
    fn scan_keys_filters_and_sorts() {
        let s = AttributeStore::in_memory();
        assert!(s.scan_keys(0, 1).is_empty());
        for d in ["b", "a"] {
            for a in ["unit", "geolocation"] {
                s.put_version(&key(d, a), &v(1, "x")).unwrap();
            }
        }
        assert_eq!(
            s.scan_keys(0, 1),
            [
                key("a", "geolocation"),
                key("a", "unit"),
                key("b", "geolocation"),
                key("b", "unit")
            ]
        );
    }

    #[test]
    fn journal_replays_after_restart_and_drops_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.journal");
        {
            let s = AttributeStore::open(&path, true).unwrap();
            s.put_version(&key("d", "unit"), &v(100, "A")).unwrap();
            s.put_version(&key("d", "unit"), &v(200, "B")).unwrap();
            s.put_version(&key("e", "unit"), &v(5, "m")).unwrap();
        }
        let full_len = std::fs::metadata(&path).unwrap().len();
        // A torn partial record at the tail.
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        let extra = AttributeUpdate {
            key: key("f", "unit"),
            version: v(1, "zzz"),
        }
        .encode();
        f.write_all(&extra[..extra.len() - 2]).unwrap();
        drop(f);

        let s = AttributeStore::open(&path, true).unwrap();
        assert_eq!(s.history(&key("d", "unit")), [v(100, "A"), v(200, "B")]);
        assert_eq!(s.history(&key("e", "unit")), [v(5, "m")]);
        assert_eq!(s.key_count(), 2);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), full_len);
        s.put_version(&key("f", "unit"), &v(1, "zzz")).unwrap();
        drop(s);
        let s = AttributeStore::open(&path, true).unwrap();
        assert_eq!(s.key_count(), 3);
    }

    #[test]
    fn remote_handle_failures() {
        let r = RemoteStore::new(Arc::new(AttributeStore::in_memory()), Duration::ZERO);
        let k = key("d", "unit");
        r.put_version(&k, &v(1, "a")).unwrap();
        r.fail_next(2);
        assert!(matches!(r.get_at(&k, 5), Err(StoreError::Unavailable)));
        assert!(r.get_latest_two(&k).unwrap_err().is_transient());
        assert_eq!(r.get_at(&k, 5).unwrap(), Some(v(1, "a")));
        r.set_available(false);
        assert!(r.scan_keys(0, 1).is_err());
        r.set_available(true);
        assert_eq!(r.scan_keys(0, 1).unwrap(), [k]);
        assert_eq!(r.stats().get_at.load(Ordering::Relaxed), 1);
    }

    #[test]
    fn remote_reads_pay_latency() {
        let r = RemoteStore::new(
            Arc::new(AttributeStore::in_memory()),
            Duration::from_millis(5),
        );
        let start = std::time::Instant::now();
        for _ in 0..4 {
            r.get_at(&key("d", "u"), 1).unwrap();
        }
        assert!(start.elapsed() >= Duration::from_millis(20));
    }
}
