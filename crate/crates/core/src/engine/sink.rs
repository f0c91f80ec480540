//! Idempotent output for one partition.
//!
//! Records are buffered and appended in batches to the results or dead-letter
//! topic. Both share one dedup index keyed by `(device, seq)`; a record whose
//! key was already written is dropped.
//!
//! Replay never reaches behind the last checkpoint, so keys written by this
//! incarnation are forgotten after each checkpoint. Keys found on recovery,
//! by scanning both topics from the checkpointed output offsets, are kept
//! until replay has produced each of them once more; until then checkpoints
//! keep pointing at the old scan start so a second crash rescans them too.
//! This relies on `(device, seq)` being unique in the input.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;
use std::time::Duration;

use crate::log::{LogError, Topic};
use crate::model::{DeviceId, EnrichedMeasurement, Measurement};
use crate::wire::Wire;

use super::EngineError;

const FLUSH_ATTEMPTS: u32 = 5;
const REBUILD_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Emit {
    Queued,
    /// Already written or queued under the same `(device, seq)`.
    Suppressed,
}

/// Counts of records that actually reached the output topics.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SinkStats {
    pub enriched: u64,
    pub dead_lettered: u64,
    pub suppressed: u64,
    /// Attribute provenance counts of written enriched records, indexed by
    /// `Provenance as usize`.
    pub provenance: [u64; 4],
}

#[derive(Default)]
struct Pending {
    results: Vec<(DeviceId, Vec<u8>)>,
    dead: Vec<(DeviceId, Vec<u8>)>,
    provenance: [u64; 4],
}

pub struct DedupSink {
    partition: u32,
    results: Arc<Topic>,
    dead_letter: Arc<Topic>,
    /// Dense ids for devices seen by this sink. Keeping the dedup sets free
    /// of reference-counted ids makes clearing them cheap.
    ids: HashMap<DeviceId, u32>,
    /// Keys written since the last checkpoint by this incarnation.
    live: HashSet<(u32, u64)>,
    /// Keys found on recovery that replay has not reached yet.
    recovered: HashSet<(u32, u64)>,
    /// Output offsets a rebuild must scan from while `recovered` is non-empty.
    rescan_from: (u64, u64),
    high_watermark: HashMap<DeviceId, u64>,
    pending: Pending,
    stats: SinkStats,
}

impl std::fmt::Debug for DedupSink {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DedupSink")
            .field("partition", &self.partition)
            .field("live", &self.live.len())
            .field("recovered", &self.recovered.len())
            .field("buffered", &self.buffered())
            .finish()
    }
}

impl DedupSink {
    pub fn new(partition: u32, results: Arc<Topic>, dead_letter: Arc<Topic>) -> Self {
        Self {
            partition,
            results,
            dead_letter,
            ids: HashMap::new(),
            live: HashSet::new(),
            recovered: HashSet::new(),
            rescan_from: (0, 0),
            high_watermark: HashMap::new(),
            pending: Pending::default(),
            stats: SinkStats::default(),
        }
    }

    /// Seeds the dedup index with everything written at or after the given
    /// offsets, and restores the high-watermark summary.
    pub fn rebuild(
        &mut self,
        results_from: u64,
        dead_letter_from: u64,
        high_watermark: &[(DeviceId, u64)],
    ) -> Result<(), EngineError> {
        self.high_watermark = high_watermark.iter().cloned().collect();
        self.rescan_from = (results_from, dead_letter_from);
        let mut from = results_from;
        loop {
            let chunk = self.results.read(self.partition, from, REBUILD_CHUNK)?;
            let Some(last) = chunk.last() else { break };
            from = last.offset + 1;
            for rec in &chunk {
                let e = EnrichedMeasurement::decode(&rec.payload).map_err(|source| {
                    EngineError::decode(&self.results, self.partition, rec.offset, source)
                })?;
                self.recover_key(e.measurement.device, e.measurement.seq);
            }
        }
        let mut from = dead_letter_from;
        loop {
            let chunk = self.dead_letter.read(self.partition, from, REBUILD_CHUNK)?;
            let Some(last) = chunk.last() else { break };
            from = last.offset + 1;
            for rec in &chunk {
                let m = Measurement::decode(&rec.payload).map_err(|source| {
                    EngineError::decode(&self.dead_letter, self.partition, rec.offset, source)
                })?;
                self.recover_key(m.device, m.seq);
            }
        }
        Ok(())
    }

    fn raise_watermark(&mut self, device: &DeviceId, seq: u64) {
        match self.high_watermark.get_mut(device) {
            Some(hw) => *hw = (*hw).max(seq),
            None => {
                self.high_watermark.insert(device.clone(), seq);
            }
        }
    }

    fn id(&mut self, device: &DeviceId) -> u32 {
        if let Some(&id) = self.ids.get(device) {
            return id;
        }
        let id = self.ids.len() as u32;
        self.ids.insert(device.clone(), id);
        id
    }

    fn recover_key(&mut self, device: DeviceId, seq: u64) {
        self.raise_watermark(&device, seq);
        let key = (self.id(&device), seq);
        self.recovered.insert(key);
    }

    fn admit(&mut self, device: &DeviceId, seq: u64) -> bool {
        let key = (self.id(device), seq);
        if self.recovered.remove(&key) {
            self.live.insert(key);
            self.stats.suppressed += 1;
            return false;
        }
        if !self.live.insert(key) {
            self.stats.suppressed += 1;
            return false;
        }
        self.raise_watermark(device, seq);
        true
    }

    pub fn emit(&mut self, e: &EnrichedMeasurement) -> Emit {
        let m = &e.measurement;
        if !self.admit(&m.device, m.seq) {
            return Emit::Suppressed;
        }
        for a in &e.attributes {
            self.pending.provenance[a.provenance as usize] += 1;
        }
        self.pending.results.push((m.device.clone(), e.encode()));
        Emit::Queued
    }

    pub fn dead_letter(&mut self, m: &Measurement) -> Emit {
        if !self.admit(&m.device, m.seq) {
            return Emit::Suppressed;
        }
        self.pending.dead.push((m.device.clone(), m.encode()));
        Emit::Queued
    }

    pub fn buffered(&self) -> usize {
        self.pending.results.len() + self.pending.dead.len()
    }

    /// Writes buffered records. Failed appends leave nothing behind in the
    /// log and are retried a few times before the error is returned.
    pub fn flush(&mut self) -> Result<(), EngineError> {
        if !self.pending.results.is_empty() {
            append_with_retry(&self.results, self.partition, &self.pending.results)?;
            self.stats.enriched += self.pending.results.len() as u64;
            for (total, n) in self.stats.provenance.iter_mut().zip(self.pending.provenance) {
                *total += n;
            }
            self.pending.results.clear();
            self.pending.provenance = [0; 4];
        }
        if !self.pending.dead.is_empty() {
            append_with_retry(&self.dead_letter, self.partition, &self.pending.dead)?;
            self.stats.dead_lettered += self.pending.dead.len() as u64;
            self.pending.dead.clear();
        }
        Ok(())
    }

    /// Forgets the keys written by this incarnation. Call only right after
    /// a checkpoint that covers them.
    pub fn checkpointed(&mut self) {
        debug_assert_eq!(self.buffered(), 0);
        self.live.clear();
    }

    /// Output offsets a checkpoint taken now must record: the current ends,
    /// or the recovery scan start while recovered keys are outstanding.
    pub fn checkpoint_offsets(&self) -> Result<(u64, u64), LogError> {
        if !self.recovered.is_empty() {
            return Ok(self.rescan_from);
        }
        Ok((
            self.results.end_offset(self.partition)?,
            self.dead_letter.end_offset(self.partition)?,
        ))
    }

    /// Recovered keys that replay has not reproduced yet.
    pub fn outstanding(&self) -> usize {
        self.recovered.len()
    }

    /// Highest seq written or queued per device, sorted by device.
    pub fn high_watermark(&self) -> Vec<(DeviceId, u64)> {
        let mut out: Vec<_> = self
            .high_watermark
            .iter()
            .map(|(d, s)| (d.clone(), *s))
            .collect();
        out.sort_unstable();
        out
    }

    pub fn stats(&self) -> &SinkStats {
        &self.stats
    }
}

fn append_with_retry(
    topic: &Topic,
    partition: u32,
    records: &[(DeviceId, Vec<u8>)],
) -> Result<(), LogError> {
    let keyed: Vec<(&[u8], &[u8])> = records
        .iter()
        .map(|(d, p)| (d.as_bytes(), p.as_slice()))
        .collect();
    let mut attempt = 0;
    loop {
        match topic.append_batch(partition, &keyed) {
            Ok(_) => return Ok(()),
            Err(LogError::Io(e)) if attempt + 1 < FLUSH_ATTEMPTS => {
                attempt += 1;
                log::warn!("append to {} failed ({e}), retry {attempt}", topic.name());
                std::thread::sleep(Duration::from_millis(10 << attempt));
            }
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::log::Log;
    use crate::model::{EnrichedAttribute, Provenance};
    use crate::partition::partition_for;

    fn record(dev: &str, seq: u64) -> EnrichedMeasurement {
        EnrichedMeasurement {
            measurement: Measurement {
                device: DeviceId::new(dev).unwrap(),
                seq,
                event_time: 1000 + seq,
                observable: "pressure".into(),
                value: seq as f64,
                ingest_time: 5,
            },
            attributes: vec![EnrichedAttribute {
                name: "unit".into(),
                value: "bar".into(),
                provenance: Provenance::Current,
            }],
            enrich_time: 9,
            latency_ms: 4,
        }
    }

    fn setup() -> (tempfile::TempDir, Arc<Topic>, Arc<Topic>) {
        let dir = tempfile::tempdir().unwrap();
        let log = Log::open(dir.path()).unwrap();
        let r = log.create_topic("enriched", 1).unwrap();
        let d = log.create_topic("dead-letter", 1).unwrap();
        (dir, r, d)
    }

    #[test]
    fn suppresses_replayed_keys_across_both_outputs() {
        let (_dir, r, d) = setup();
        let mut sink = DedupSink::new(0, r.clone(), d.clone());
        assert_eq!(sink.emit(&record("dev1", 7)), Emit::Queued);
        assert_eq!(sink.emit(&record("dev1", 7)), Emit::Suppressed);
        assert_eq!(sink.dead_letter(&record("dev1", 7).measurement), Emit::Suppressed);
        assert_eq!(sink.dead_letter(&record("dev1", 8).measurement), Emit::Queued);
        sink.flush().unwrap();
        assert_eq!(r.end_offset(0).unwrap(), 1);
        assert_eq!(d.end_offset(0).unwrap(), 1);
        assert_eq!(sink.stats().suppressed, 2);
        assert_eq!(sink.stats().provenance, [1, 0, 0, 0]);
        assert_eq!(
            sink.high_watermark(),
            vec![(DeviceId::new("dev1").unwrap(), 8)]
        );
    }

    #[test]
    fn rebuild_covers_records_after_offsets() {
        let (_dir, r, d) = setup();
        let mut sink = DedupSink::new(0, r.clone(), d.clone());
        for seq in 0..10 {
            sink.emit(&record("a", seq));
        }
        sink.flush().unwrap();

        let mut fresh = DedupSink::new(0, r.clone(), d.clone());
        fresh.rebuild(4, 0, &[]).unwrap();
        assert_eq!(fresh.emit(&record("a", 3)), Emit::Queued);
        for seq in 4..10 {
            assert_eq!(fresh.emit(&record("a", seq)), Emit::Suppressed);
        }
    }

    #[test]
    fn ten_thousand_with_a_thousand_replays_leaves_nine_thousand() {
        let dir = tempfile::tempdir().unwrap();
        let log = Log::open(dir.path()).unwrap();
        let r = log.create_topic("enriched", 4).unwrap();
        let d = log.create_topic("dead-letter", 4).unwrap();
        let mut sinks: Vec<_> = (0..4).map(|p| DedupSink::new(p, r.clone(), d.clone())).collect();
        let devices: Vec<String> = (0..30).map(|i| format!("dev-{i}")).collect();
        let mut emissions = Vec::new();
        for i in 0..9_000u64 {
            emissions.push((devices[(i % 30) as usize].clone(), i / 30));
        }
        for i in (0..9_000).step_by(9) {
            emissions.push(emissions[i].clone());
        }
        assert_eq!(emissions.len(), 10_000);
        for (dev, seq) in &emissions {
            let p = partition_for(dev.as_bytes(), 4) as usize;
            sinks[p].emit(&record(dev, *seq));
        }
        for s in &mut sinks {
            s.flush().unwrap();
        }
        assert_eq!(r.total_records(), 9_000);
        let suppressed: u64 = sinks.iter().map(|s| s.stats().suppressed).sum();
        assert_eq!(suppressed, 1_000);
        let mut keys = HashSet::new();
        for p in 0..4 {
            for rec in r.read(p, 0, usize::MAX).unwrap() {
                let e = EnrichedMeasurement::decode(&rec.payload).unwrap();
                assert!(keys.insert((e.measurement.device, e.measurement.seq)));
            }
        }
        assert_eq!(keys.len(), 9_000);
    }
}
