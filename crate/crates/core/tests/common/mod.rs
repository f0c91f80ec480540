#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use tidewater::config::{Platform, PlatformConfig};
use tidewater::engine::{Engine, KillPoint, MissingPolicy, WorkerReport};
use tidewater::generator::{drive, Speed, Trace};
use tidewater::log::Topic;
use tidewater::wire::{Envelope, Wire};
use tidewater::{AttributeKey, EnrichedMeasurement, Measurement, Provenance};

/// Output fields that do not depend on timing.
pub type Row = (String, u64, u64, String, u64, Vec<(String, String, Provenance)>);

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Output {
    pub enriched: Vec<Row>,
    pub dead: Vec<(String, u64)>,
}

pub fn row(e: &EnrichedMeasurement) -> Row {
    let m = &e.measurement;
    (
        m.device.to_string(),
        m.seq,
        m.event_time,
        m.observable.clone(),
        m.value.to_bits(),
        e.attributes
            .iter()
            .map(|a| (a.name.clone(), a.value.clone(), a.provenance))
            .collect(),
    )
}

pub fn collect(results: &Topic, dead: &Topic) -> Output {
    let mut out = Output::default();
    for p in 0..results.partitions() {
        for r in results.read(p, 0, usize::MAX).unwrap() {
            out.enriched.push(row(&EnrichedMeasurement::decode(&r.payload).unwrap()));
        }
        for r in dead.read(p, 0, usize::MAX).unwrap() {
            let m = Measurement::decode(&r.payload).unwrap();
            out.dead.push((m.device.to_string(), m.seq));
        }
    }
    out.enriched.sort_by(|a, b| (&a.0, a.1).cmp(&(&b.0, b.1)));
    out.dead.sort();
    out
}

/// In-order scan of the trace keeping full histories.
pub fn reference(trace: &Trace, attributes: &[String], policy: MissingPolicy) -> Output {
    let mut histories: HashMap<AttributeKey, BTreeMap<u64, String>> = HashMap::new();
    let mut out = Output::default();
    for e in trace.events() {
        match e {
            Envelope::Update { record, .. } => {
                histories
                    .entry(record.key.clone())
                    .or_default()
                    .insert(record.version.valid_from, record.version.value.clone());
            }
            Envelope::Measurement { record: m, .. } => {
                let mut attrs = Vec::new();
                let mut missing = false;
                for name in attributes {
                    let key = AttributeKey::new(m.device.clone(), name.clone()).unwrap();
                    let h = histories.get(&key);
                    let newest: Vec<u64> = h
                        .map(|h| h.keys().rev().take(2).copied().collect())
                        .unwrap_or_default();
                    let at = h.and_then(|h| h.range(..=m.event_time).next_back());
                    let (value, prov) = match at {
                        None => {
                            missing = true;
                            (String::new(), Provenance::Missing)
                        }
                        Some((vf, v)) => {
                            let prov = if newest.first() == Some(vf) {
                                Provenance::Current
                            } else if newest.get(1) == Some(vf) {
                                Provenance::Previous
                            } else {
                                Provenance::Historical
                            };
                            (v.clone(), prov)
                        }
                    };
                    attrs.push((name.clone(), value, prov));
                }
                if missing && policy == MissingPolicy::DeadLetter {
                    out.dead.push((m.device.to_string(), m.seq));
                } else {
                    out.enriched.push((
                        m.device.to_string(),
                        m.seq,
                        m.event_time,
                        m.observable.clone(),
                        m.value.to_bits(),
                        attrs,
                    ));
                }
            }
        }
    }
    out.enriched.sort_by(|a, b| (&a.0, a.1).cmp(&(&b.0, b.1)));
    out.dead.sort();
    out
}

pub fn platform(dir: &Path, partitions: u32, attributes: &[String]) -> PlatformConfig {
    let mut c = PlatformConfig::in_dir(dir);
    c.engine.partitions = partitions;
    c.engine.enrichment_attributes = attributes.to_vec();
    c.store.simulated_latency_ms = 0;
    c.store.fsync = false;
    c.log.fsync = false;
    c
}

pub struct RunResult {
    pub output: Output,
    pub reports: Vec<WorkerReport>,
    pub platform: Platform,
}

/// Injects the whole trace, then runs the engine until it has consumed it.
pub fn run_backlog(config: PlatformConfig, trace: &Trace, kills: &[(u32, KillPoint)]) -> RunResult {
    let platform = Platform::open(config).unwrap();
    let t = &platform.context.topics;
    drive(trace, &t.measurements, &t.updates, Speed::Max).unwrap();
    let engine = Engine::start(platform.context.clone(), kills).unwrap();
    let reports = engine.finish().unwrap();
    let output = collect(&t.results, &t.dead_letter);
    RunResult {
        output,
        reports,
        platform,
    }
}

pub fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}
