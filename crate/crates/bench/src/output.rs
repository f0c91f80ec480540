//! Timing-independent projection of engine output, used to compare runs.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use tidewater::log::{LogError, Topic};
use tidewater::wire::{Wire, WireError};
use tidewater::{EnrichedMeasurement, Measurement, Provenance};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeRow {
    pub name: String,
    pub value: String,
    pub provenance: String,
}

/// An enriched record without enrich time, latency or ingest time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRow {
    pub device: String,
    pub seq: u64,
    pub event_time: u64,
    pub observable: String,
    pub value: f64,
    pub attributes: Vec<AttributeRow>,
}

impl OutputRow {
    pub fn new(m: &Measurement, attributes: Vec<AttributeRow>) -> Self {
        Self {
            device: m.device.to_string(),
            seq: m.seq,
            event_time: m.event_time,
            observable: m.observable.clone(),
            value: m.value,
            attributes,
        }
    }

    pub fn from_enriched(e: &EnrichedMeasurement) -> Self {
        let attributes = e
            .attributes
            .iter()
            .map(|a| AttributeRow {
                name: a.name.clone(),
                value: a.value.clone(),
                provenance: a.provenance.as_str().to_owned(),
            })
            .collect();
        Self::new(&e.measurement, attributes)
    }

    fn key(&self) -> (&str, u64) {
        (&self.device, self.seq)
    }

    /// Field-wise equality with bitwise float comparison.
    pub fn same(&self, o: &OutputRow) -> bool {
        self.value.to_bits() == o.value.to_bits() && self == o
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DeadRow {
    pub device: String,
    pub seq: u64,
}

/// Everything a run wrote, sorted by `(device, seq)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Output {
    pub enriched: Vec<OutputRow>,
    pub dead_letter: Vec<DeadRow>,
}

impl Output {
    pub fn sort(&mut self) {
        self.enriched.sort_by(|a, b| a.key().cmp(&b.key()));
        self.dead_letter.sort();
    }

    pub fn len(&self) -> usize {
        self.enriched.len() + self.dead_letter.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Counts per provenance, indexed by `Provenance as usize`.
    pub fn provenance_counts(&self) -> [u64; 4] {
        let mut counts = [0; 4];
        for r in &self.enriched {
            for a in &r.attributes {
                let p = Provenance::ALL
                    .iter()
                    .position(|p| p.as_str() == a.provenance)
                    .expect("known provenance");
                counts[p] += 1;
            }
        }
        counts
    }

    /// Describes the first difference between `self` (expected) and
    /// `actual`, or `None` if they are identical.
    pub fn first_divergence(&self, actual: &Output) -> Option<String> {
        if let Some(d) = first_row_divergence(&self.enriched, &actual.enriched) {
            return Some(format!("results: {d}"));
        }
        first_dead_divergence(&self.dead_letter, &actual.dead_letter)
            .map(|d| format!("dead letter: {d}"))
    }
}

fn first_row_divergence(expected: &[OutputRow], actual: &[OutputRow]) -> Option<String> {
    let mut i = 0;
    let mut j = 0;
    while i < expected.len() && j < actual.len() {
        let (e, a) = (&expected[i], &actual[j]);
        match e.key().cmp(&a.key()) {
            Ordering::Equal if e.same(a) => {
                i += 1;
                j += 1;
            }
            Ordering::Equal => return Some(format!("expected {e:?}, got {a:?}")),
            Ordering::Less => return Some(format!("missing {e:?}")),
            Ordering::Greater => return Some(format!("unexpected {a:?}")),
        }
    }
    if let Some(e) = expected.get(i) {
        return Some(format!("missing {e:?}"));
    }
    actual.get(j).map(|a| format!("unexpected {a:?}"))
}

fn first_dead_divergence(expected: &[DeadRow], actual: &[DeadRow]) -> Option<String> {
    for (e, a) in expected.iter().zip(actual) {
        if e != a {
            return Some(format!("expected {e:?}, got {a:?}"));
        }
    }
    match expected.len().cmp(&actual.len()) {
        Ordering::Equal => None,
        Ordering::Greater => Some(format!("missing {:?}", expected[actual.len()])),
        Ordering::Less => Some(format!("unexpected {:?}", actual[expected.len()])),
    }
}

/// Reads both output topics in full.
pub fn collect(results: &Topic, dead_letter: &Topic) -> Result<Output, anyhow::Error> {
    let mut out = Output::default();
    for p in 0..results.partitions() {
        for r in read_all(results, p)? {
            let e = EnrichedMeasurement::decode(&r).map_err(decode_err(results, p))?;
            out.enriched.push(OutputRow::from_enriched(&e));
        }
    }
    for p in 0..dead_letter.partitions() {
        for r in read_all(dead_letter, p)? {
            let m = Measurement::decode(&r).map_err(decode_err(dead_letter, p))?;
            out.dead_letter.push(DeadRow {
                device: m.device.to_string(),
                seq: m.seq,
            });
        }
    }
    out.sort();
    Ok(out)
}

/// Calls `f` on every enriched record of `results`.
pub fn for_each_enriched(
    results: &Topic,
    mut f: impl FnMut(EnrichedMeasurement),
) -> Result<(), anyhow::Error> {
    for p in 0..results.partitions() {
        let mut from = 0;
        loop {
            let chunk = results.read(p, from, 8192)?;
            let Some(last) = chunk.last() else { break };
            from = last.offset + 1;
            for r in chunk {
                f(EnrichedMeasurement::decode(&r.payload).map_err(decode_err(results, p))?);
            }
        }
    }
    Ok(())
}

fn read_all(topic: &Topic, partition: u32) -> Result<Vec<Vec<u8>>, LogError> {
    Ok(topic
        .read(partition, 0, usize::MAX)?
        .into_iter()
        .map(|r| r.payload)
        .collect())
}

fn decode_err(topic: &Topic, partition: u32) -> impl Fn(WireError) -> anyhow::Error + '_ {
    move |e| anyhow::anyhow!("undecodable record in {}/{partition}: {e}", topic.name())
}
