//! One partition's enrichment loop.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::log::{Log, LogRecord, Topic};
use crate::model::{now_millis, AttributeUpdate, Millis, StreamOffset};
use crate::store::{RemoteStore, StoreError};
use crate::wire::Envelope;

use super::checkpoint::{Checkpoint, CheckpointDir};
use super::config::EngineConfig;
use super::sink::{DedupSink, SinkStats};
use super::state::{apply_update, enrich, CacheChange, CachedVersions, Enrichment, LocalAttributeState};
use super::EngineError;

const UPDATE_DRAIN_CHUNK: usize = 4096;
const IDLE_SLEEP: Duration = Duration::from_millis(1);
const RETRY_MIN: Duration = Duration::from_millis(1);
const RETRY_MAX: Duration = Duration::from_millis(200);

/// The four topics a worker reads from and writes to.
#[derive(Debug, Clone)]
pub struct EngineTopics {
    pub measurements: Arc<Topic>,
    pub updates: Arc<Topic>,
    pub results: Arc<Topic>,
    pub dead_letter: Arc<Topic>,
}

impl EngineTopics {
    /// Opens the configured topics, creating missing ones with
    /// `config.partitions` partitions.
    pub fn open_or_create(log: &Log, config: &EngineConfig) -> Result<Self, EngineError> {
        let t = &config.topics;
        let open = |name: &str| -> Result<Arc<Topic>, EngineError> {
            let topic = log.open_or_create_topic(name, config.partitions)?;
            if topic.partitions() != config.partitions {
                return Err(EngineError::PartitionMismatch {
                    topic: name.to_owned(),
                    actual: topic.partitions(),
                    expected: config.partitions,
                });
            }
            Ok(topic)
        };
        Ok(Self {
            measurements: open(&t.measurements)?,
            updates: open(&t.updates)?,
            results: open(&t.results)?,
            dead_letter: open(&t.dead_letter)?,
        })
    }
}

/// Everything a worker needs besides its partition index.
#[derive(Debug, Clone)]
pub struct EngineContext {
    pub config: Arc<EngineConfig>,
    pub topics: EngineTopics,
    pub store: RemoteStore,
}

/// Cooperative signals from the supervisor and the input driver.
#[derive(Debug, Default)]
pub struct WorkerControl {
    stop: AtomicBool,
    input_complete: AtomicBool,
}

impl WorkerControl {
    pub fn new() -> Self {
        Self::default()
    }

    /// Asks workers to checkpoint and exit at the next batch boundary.
    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    pub fn stop_requested(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    /// Declares that no more input will be appended. Workers exit once they
    /// have consumed everything.
    pub fn input_complete(&self) {
        self.input_complete.store(true, Ordering::SeqCst);
    }

    pub fn is_input_complete(&self) -> bool {
        self.input_complete.load(Ordering::SeqCst)
    }
}

/// Where an injected crash happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KillPoint {
    /// Once the measurement offset reaches this value, before the output
    /// buffer is flushed.
    AfterMeasurements(u64),
    /// Once the applied update offset reaches this value.
    AfterUpdates(u64),
    /// After the checkpoint with this epoch is durable in its temporary file
    /// but before it is renamed into place.
    MidCheckpoint(u64),
    /// Right after the checkpoint with this epoch is in place.
    AfterCheckpoint(u64),
    /// At the first record or batch boundary after this much run time.
    AfterElapsed(Duration),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WorkerStats {
    /// Measurements consumed, including replays.
    pub measurements: u64,
    pub updates_applied: u64,
    /// Updates refused by the store because they contradict a stored version.
    pub updates_rejected: u64,
    pub cache_rebuilds: u64,
    /// Input records that failed to decode and were skipped.
    pub malformed: u64,
    pub checkpoints: u64,
    pub store_retries: u64,
    pub sink: SinkStats,
}

impl WorkerStats {
    pub fn merge(&mut self, o: &WorkerStats) {
        self.measurements += o.measurements;
        self.updates_applied += o.updates_applied;
        self.updates_rejected += o.updates_rejected;
        self.cache_rebuilds += o.cache_rebuilds;
        self.malformed += o.malformed;
        self.checkpoints += o.checkpoints;
        self.store_retries += o.store_retries;
        self.sink.enriched += o.sink.enriched;
        self.sink.dead_lettered += o.sink.dead_lettered;
        self.sink.suppressed += o.sink.suppressed;
        for (a, b) in self.sink.provenance.iter_mut().zip(o.sink.provenance) {
            *a += b;
        }
    }
}

struct PendingUpdate {
    offset: u64,
    arrival: Millis,
    /// `None` for an undecodable record, which is skipped in order.
    update: Option<AttributeUpdate>,
}

pub struct PartitionWorker {
    partition: u32,
    ctx: EngineContext,
    control: Arc<WorkerControl>,
    state: LocalAttributeState,
    sink: DedupSink,
    checkpoints: CheckpointDir,
    measurement_offset: u64,
    update_read_offset: u64,
    update_applied_offset: u64,
    pending: VecDeque<PendingUpdate>,
    next_epoch: u64,
    last_checkpoint: Instant,
    since_checkpoint: u64,
    recovered_from: Option<Checkpoint>,
    stats: WorkerStats,
    kill: Option<KillPoint>,
    started: Instant,
}

impl std::fmt::Debug for PartitionWorker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PartitionWorker")
            .field("partition", &self.partition)
            .field("measurement_offset", &self.measurement_offset)
            .field("update_offset", &self.update_applied_offset)
            .finish()
    }
}

impl PartitionWorker {
    /// Restores a worker from its newest valid checkpoint, or cold-starts at
    /// offset zero. The cache is reloaded from the store and the sink's dedup
    /// index from the outputs written since the checkpoint.
    pub fn recover(
        partition: u32,
        ctx: EngineContext,
        control: Arc<WorkerControl>,
    ) -> Result<Self, EngineError> {
        let config = &ctx.config;
        let checkpoints = CheckpointDir::new(&config.checkpoint_dir, partition);
        let (ckpt, skipped) = checkpoints.load_latest(partition)?;
        if skipped > 0 {
            log::warn!("partition {partition}: skipped {skipped} unreadable checkpoint(s)");
        }
        let mut stats = WorkerStats::default();
        let store = ctx.store.clone();
        let keys = retry(&control, &mut stats, || {
            store.scan_keys(partition, config.partitions)
        })?;
        let mut state = LocalAttributeState::new();
        for key in keys {
            let latest = retry(&control, &mut stats, || store.get_latest_two(&key))?;
            state.insert(&key, CachedVersions::from_latest_two(latest));
        }
        let t = &ctx.topics;
        let mut sink = DedupSink::new(partition, t.results.clone(), t.dead_letter.clone());
        let (m_off, u_off, epoch) = match &ckpt {
            Some(c) => {
                sink.rebuild(
                    c.results_offset.offset,
                    c.dead_letter_offset.offset,
                    &c.emitted_high_watermark,
                )?;
                (c.measurement_offset.offset, c.update_offset.offset, c.epoch + 1)
            }
            None => {
                sink.rebuild(0, 0, &[])?;
                (0, 0, 0)
            }
        };
        log::debug!(
            "partition {partition}: recovered at measurements {m_off}, updates {u_off}, {} cached keys",
            state.len()
        );
        Ok(Self {
            partition,
            checkpoints,
            control,
            state,
            sink,
            measurement_offset: m_off,
            update_read_offset: u_off,
            update_applied_offset: u_off,
            pending: VecDeque::new(),
            next_epoch: epoch,
            last_checkpoint: Instant::now(),
            since_checkpoint: 0,
            recovered_from: ckpt,
            stats,
            kill: None,
            started: Instant::now(),
            ctx,
        })
    }

    pub fn with_kill_point(mut self, kill: Option<KillPoint>) -> Self {
        self.kill = kill;
        self
    }

    pub fn partition(&self) -> u32 {
        self.partition
    }

    /// Next measurement offset to consume.
    pub fn measurement_offset(&self) -> u64 {
        self.measurement_offset
    }

    /// Next update offset to apply.
    pub fn update_offset(&self) -> u64 {
        self.update_applied_offset
    }

    pub fn state(&self) -> &LocalAttributeState {
        &self.state
    }

    pub fn into_state(self) -> LocalAttributeState {
        self.state
    }

    pub fn recovered_from(&self) -> Option<&Checkpoint> {
        self.recovered_from.as_ref()
    }

    pub fn stats(&self) -> WorkerStats {
        let mut s = self.stats.clone();
        s.sink = self.sink.stats().clone();
        s
    }

    /// Processes input until stopped, or until input is complete and fully
    /// consumed. Either way ends with a checkpoint.
    pub fn run(&mut self) -> Result<(), EngineError> {
        loop {
            if self.control.stop_requested() {
                return self.checkpoint();
            }
            self.check_kill(|_| false)?;
            let progressed = self.step()?;
            if self.checkpoint_due() {
                self.checkpoint()?;
            }
            if !progressed {
                if self.control.is_input_complete() && self.drained()? {
                    return self.checkpoint();
                }
                std::thread::sleep(IDLE_SLEEP);
            }
        }
    }

    fn drained(&mut self) -> Result<bool, EngineError> {
        let t = &self.ctx.topics;
        Ok(self.pending.is_empty()
            && self.measurement_offset >= t.measurements.end_offset(self.partition)?
            && self.update_read_offset >= t.updates.end_offset(self.partition)?)
    }

    /// One merge step: drain updates, read a measurement batch, drain again,
    /// then enrich the batch in order. Before each measurement every pending
    /// update that arrived no later than it is applied. Returns whether any
    /// input was consumed.
    pub fn step(&mut self) -> Result<bool, EngineError> {
        self.drain_updates()?;
        let drained_before_read = self.pending.len();
        let batch = self.ctx.topics.measurements.read(
            self.partition,
            self.measurement_offset,
            self.ctx.config.batch_size,
        )?;
        if batch.is_empty() {
            // No unread measurement was appended ahead of these updates.
            for _ in 0..drained_before_read {
                self.apply_front()?;
            }
            return Ok(drained_before_read > 0);
        }
        self.drain_updates()?;
        for rec in batch {
            self.process(rec)?;
            if self.record_checkpoint_due() {
                self.checkpoint()?;
            }
        }
        self.sink.flush()?;
        Ok(true)
    }

    fn drain_updates(&mut self) -> Result<(), EngineError> {
        loop {
            let chunk = self.ctx.topics.updates.read(
                self.partition,
                self.update_read_offset,
                UPDATE_DRAIN_CHUNK,
            )?;
            let Some(last) = chunk.last() else { return Ok(()) };
            self.update_read_offset = last.offset + 1;
            for rec in chunk {
                let pending = match Envelope::decode(&rec.payload) {
                    Ok(Envelope::Update { arrival, record }) => PendingUpdate {
                        offset: rec.offset,
                        arrival,
                        update: Some(record),
                    },
                    other => {
                        self.malformed(&self.ctx.topics.updates, rec.offset, other.err());
                        PendingUpdate {
                            offset: rec.offset,
                            arrival: 0,
                            update: None,
                        }
                    }
                };
                self.pending.push_back(pending);
            }
        }
    }

    fn malformed(&self, topic: &Topic, offset: u64, err: Option<crate::wire::WireError>) {
        match err {
            Some(e) => log::error!(
                "skipping undecodable record {}/{}@{offset}: {e}",
                topic.name(),
                self.partition
            ),
            None => log::error!(
                "skipping record of the wrong kind at {}/{}@{offset}",
                topic.name(),
                self.partition
            ),
        }
    }

    fn apply_front(&mut self) -> Result<(), EngineError> {
        // Records emitted so far must not be recomputed against a store that
        // already holds this update if we crash before they are written.
        self.sink.flush()?;
        let Some(front) = self.pending.front() else { return Ok(()) };
        let offset = front.offset;
        match &front.update {
            None => self.stats.malformed += 1,
            Some(update) => {
                let store = &self.ctx.store;
                let state = &mut self.state;
                let result = retry(&self.control, &mut self.stats, || {
                    apply_update(state, update, store)
                });
                match result {
                    Ok(change) => {
                        self.stats.updates_applied += 1;
                        if change == CacheChange::Rebuilt {
                            self.stats.cache_rebuilds += 1;
                        }
                    }
                    Err(EngineError::Store(e @ StoreError::Conflict { .. })) => {
                        log::warn!("partition {}: rejected update: {e}", self.partition);
                        self.stats.updates_rejected += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        self.pending.pop_front();
        self.update_applied_offset = offset + 1;
        self.check_kill(|k| matches!(k, KillPoint::AfterUpdates(n) if offset + 1 >= n))
    }

    fn process(&mut self, rec: LogRecord) -> Result<(), EngineError> {
        let (arrival, mut m) = match Envelope::decode(&rec.payload) {
            Ok(Envelope::Measurement { arrival, record }) => (arrival, record),
            other => {
                self.malformed(&self.ctx.topics.measurements, rec.offset, other.err());
                self.stats.malformed += 1;
                self.measurement_offset = rec.offset + 1;
                return Ok(());
            }
        };
        m.ingest_time = rec.append_time;
        while self.pending.front().is_some_and(|u| u.arrival <= arrival) {
            self.apply_front()?;
        }
        let config = &self.ctx.config;
        let store = &self.ctx.store;
        let state = &self.state;
        let outcome = retry(&self.control, &mut self.stats, || {
            enrich(
                state,
                m.clone(),
                &config.enrichment_attributes,
                config.missing_policy,
                store,
                now_millis(),
            )
        })?;
        match outcome {
            Enrichment::Enriched(e) => self.sink.emit(&e),
            Enrichment::DeadLetter(m) => self.sink.dead_letter(&m),
        };
        self.stats.measurements += 1;
        self.since_checkpoint += 1;
        self.measurement_offset = rec.offset + 1;
        let off = self.measurement_offset;
        self.check_kill(|k| matches!(k, KillPoint::AfterMeasurements(n) if off >= n))
    }

    fn check_kill(&mut self, hit: impl Fn(KillPoint) -> bool) -> Result<(), EngineError> {
        let Some(k) = self.kill else { return Ok(()) };
        let elapsed = matches!(k, KillPoint::AfterElapsed(d) if self.started.elapsed() >= d);
        if hit(k) || elapsed {
            self.kill = None;
            return Err(EngineError::Killed {
                measurement_offset: self.measurement_offset,
            });
        }
        Ok(())
    }

    fn checkpoint_due(&self) -> bool {
        self.last_checkpoint.elapsed() >= Duration::from_millis(self.ctx.config.checkpoint_interval_ms)
            || self.record_checkpoint_due()
    }

    fn record_checkpoint_due(&self) -> bool {
        self.ctx
            .config
            .checkpoint_every_records
            .is_some_and(|n| n > 0 && self.since_checkpoint >= n)
    }

    /// Flushes the sink and durably records both input offsets.
    pub fn checkpoint(&mut self) -> Result<(), EngineError> {
        let started = Instant::now();
        self.sink.flush()?;
        let t = &self.ctx.topics;
        let p = self.partition;
        let epoch = self.next_epoch;
        let (results_offset, dead_letter_offset) = self.sink.checkpoint_offsets()?;
        let ckpt = Checkpoint {
            partition: p,
            measurement_offset: StreamOffset::new(t.measurements.name(), p, self.measurement_offset),
            update_offset: StreamOffset::new(t.updates.name(), p, self.update_applied_offset),
            epoch,
            emitted_high_watermark: self.sink.high_watermark(),
            results_offset: StreamOffset::new(t.results.name(), p, results_offset),
            dead_letter_offset: StreamOffset::new(t.dead_letter.name(), p, dead_letter_offset),
        };
        let mid = self.kill == Some(KillPoint::MidCheckpoint(epoch));
        let offset = self.measurement_offset;
        self.checkpoints.write(&ckpt, || {
            if mid {
                Err(EngineError::Killed {
                    measurement_offset: offset,
                })
            } else {
                Ok(())
            }
        })?;
        self.next_epoch += 1;
        self.stats.checkpoints += 1;
        self.last_checkpoint = Instant::now();
        self.since_checkpoint = 0;
        let written = started.elapsed();
        self.sink.checkpointed();
        log::debug!(
            "partition {p}: checkpoint {epoch} at offset {offset}, written in {written:?}, total {:?}",
            started.elapsed()
        );
        self.check_kill(|k| k == KillPoint::AfterCheckpoint(epoch))
    }
}

/// Runs `f` until it succeeds or fails permanently. Transient store errors
/// are retried with capped exponential backoff; a stop request while the
/// store is unreachable abandons the call.
fn retry<T>(
    control: &WorkerControl,
    stats: &mut WorkerStats,
    mut f: impl FnMut() -> Result<T, StoreError>,
) -> Result<T, EngineError> {
    let mut wait = RETRY_MIN;
    loop {
        match f() {
            Ok(v) => return Ok(v),
            Err(e) if e.is_transient() => {
                if control.stop_requested() {
                    return Err(EngineError::Interrupted);
                }
                stats.store_retries += 1;
                std::thread::sleep(wait);
                wait = (wait * 2).min(RETRY_MAX);
            }
            Err(e) => return Err(e.into()),
        }
    }
}
