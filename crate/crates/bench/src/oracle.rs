//! Brute-force reference enrichment.
//!
//! Replays a trace the way a worker consumes a fully injected backlog: per
//! partition, measurements in trace order, with every update whose arrival is
//! not later than a measurement's arrival applied before it. Attribute
//! histories are kept in full and every lookup scans them, so nothing here
//! shares code with the engine's cache.

use std::collections::HashMap;

use tidewater::engine::MissingPolicy;
use tidewater::generator::Trace;
use tidewater::wire::Envelope;
use tidewater::{partition_for, AttributeUpdate, Measurement, Provenance};

use crate::output::{AttributeRow, DeadRow, Output, OutputRow};

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct OracleStats {
    pub measurements: u64,
    pub updates_applied: u64,
    /// Updates that reused a `(key, valid_from)` with a different value.
    pub updates_rejected: u64,
}

/// Full version history of one attribute of one device, unsorted.
type History = Vec<(u64, String)>;

#[derive(Default)]
struct Histories {
    by_key: HashMap<(String, String), History>,
    stats: OracleStats,
}

impl Histories {
    fn apply(&mut self, u: &AttributeUpdate) {
        let h = self
            .by_key
            .entry((u.key.device.to_string(), u.key.attribute.clone()))
            .or_default();
        match h.iter().find(|(t, _)| *t == u.version.valid_from) {
            Some((_, v)) if *v != u.version.value => self.stats.updates_rejected += 1,
            Some(_) => self.stats.updates_applied += 1,
            None => {
                h.push((u.version.valid_from, u.version.value.clone()));
                self.stats.updates_applied += 1;
            }
        }
    }

    fn lookup(&self, device: &str, name: &str, t: u64) -> (String, Provenance) {
        let Some(h) = self.by_key.get(&(device.to_owned(), name.to_owned())) else {
            return (String::new(), Provenance::Missing);
        };
        let Some((vf, value)) = h.iter().filter(|(vf, _)| *vf <= t).max_by_key(|(vf, _)| *vf) else {
            return (String::new(), Provenance::Missing);
        };
        // Rank among all versions seen so far, newest first.
        let newer = h.iter().filter(|(other, _)| other > vf).count();
        let provenance = match newer {
            0 => Provenance::Current,
            1 => Provenance::Previous,
            _ => Provenance::Historical,
        };
        (value.clone(), provenance)
    }

    fn enrich(&mut self, m: &Measurement, attributes: &[String], policy: MissingPolicy, out: &mut Output) {
        self.stats.measurements += 1;
        let device = m.device.as_str();
        let rows: Vec<AttributeRow> = attributes
            .iter()
            .map(|name| {
                let (value, p) = self.lookup(device, name, m.event_time);
                AttributeRow {
                    name: name.clone(),
                    value,
                    provenance: p.as_str().to_owned(),
                }
            })
            .collect();
        let missing = rows.iter().any(|r| r.provenance == Provenance::Missing.as_str());
        if missing && policy == MissingPolicy::DeadLetter {
            out.dead_letter.push(DeadRow {
                device: device.to_owned(),
                seq: m.seq,
            });
        } else {
            out.enriched.push(OutputRow::new(m, rows));
        }
    }
}

/// Expected output of enriching `trace` from an empty store.
pub fn oracle(
    trace: &Trace,
    partitions: u32,
    attributes: &[String],
    policy: MissingPolicy,
) -> (Output, OracleStats) {
    let mut measurements: Vec<Vec<(u64, &Measurement)>> = vec![Vec::new(); partitions as usize];
    let mut updates: Vec<Vec<(u64, &AttributeUpdate)>> = vec![Vec::new(); partitions as usize];
    for e in trace.events() {
        let p = partition_for(e.device().as_bytes(), partitions) as usize;
        match e {
            Envelope::Measurement { arrival, record } => measurements[p].push((*arrival, record)),
            Envelope::Update { arrival, record } => updates[p].push((*arrival, record)),
        }
    }
    let mut out = Output::default();
    let mut stats = OracleStats::default();
    for (ms, us) in measurements.iter().zip(&updates) {
        let mut h = Histories::default();
        let mut next = 0;
        for (arrival, m) in ms {
            while next < us.len() && us[next].0 <= *arrival {
                h.apply(us[next].1);
                next += 1;
            }
            h.enrich(m, attributes, policy, &mut out);
        }
        for (_, u) in &us[next..] {
            h.apply(u);
        }
        stats.measurements += h.stats.measurements;
        stats.updates_applied += h.stats.updates_applied;
        stats.updates_rejected += h.stats.updates_rejected;
    }
    out.sort();
    (out, stats)
}
