//! Appends a trace to the input topics.
//!
//! One injector thread per partition appends that partition's events in trace
//! order, so each worker sees updates and measurements in the order the trace
//! defines. Consecutive events for the same topic go out as one batch.

use std::time::{Duration, Instant};

use thiserror::Error;

use crate::log::{LogError, Topic};
use crate::model::Millis;
use crate::partition::partition_for;
use crate::wire::Envelope;

use super::Trace;

const MAX_BATCH: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Speed {
    /// Append as fast as the log accepts.
    Max,
    /// Append each event when its arrival time comes due, with arrival
    /// offsets divided by `speedup`.
    Realtime { speedup: f64 },
}

impl Speed {
    pub fn realtime() -> Self {
        Speed::Realtime { speedup: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InjectionReport {
    pub measurements: u64,
    pub updates: u64,
    pub elapsed: Duration,
}

impl InjectionReport {
    pub fn total(&self) -> u64 {
        self.measurements + self.updates
    }
}

#[derive(Debug, Error)]
#[error("injection aborted after {} records: {source}", report.total())]
pub struct DriveError {
    /// What was appended before the failure.
    pub report: InjectionReport,
    pub source: LogError,
}

/// Appends every event of `trace` to `measurements` or `updates`.
pub fn drive(
    trace: &Trace,
    measurements: &Topic,
    updates: &Topic,
    speed: Speed,
) -> Result<InjectionReport, DriveError> {
    let partitions = measurements.partitions();
    assert_eq!(
        partitions,
        updates.partitions(),
        "input topics must be co-partitioned"
    );
    let mut per_partition: Vec<Vec<&Envelope>> = vec![Vec::new(); partitions as usize];
    for e in trace.events() {
        per_partition[partition_for(e.device().as_bytes(), partitions) as usize].push(e);
    }
    let first_arrival = trace.events().iter().map(Envelope::arrival).min().unwrap_or(0);
    let start = Instant::now();
    let results: Vec<(InjectionReport, Option<LogError>)> = std::thread::scope(|s| {
        let handles: Vec<_> = per_partition
            .iter()
            .enumerate()
            .filter(|(_, events)| !events.is_empty())
            .map(|(p, events)| {
                s.spawn(move || {
                    inject(p as u32, events, measurements, updates, speed, start, first_arrival)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("injector panicked"))
            .collect()
    });
    let mut report = InjectionReport::default();
    let mut failure = None;
    for (r, err) in results {
        report.measurements += r.measurements;
        report.updates += r.updates;
        if failure.is_none() {
            failure = err;
        }
    }
    report.elapsed = start.elapsed();
    match failure {
        Some(source) => Err(DriveError { report, source }),
        None => Ok(report),
    }
}

fn due(start: Instant, first_arrival: Millis, arrival: Millis, speedup: f64) -> Instant {
    let ms = arrival.saturating_sub(first_arrival) as f64 / speedup;
    start + Duration::from_secs_f64(ms / 1000.0)
}

fn inject(
    partition: u32,
    events: &[&Envelope],
    measurements: &Topic,
    updates: &Topic,
    speed: Speed,
    start: Instant,
    first_arrival: Millis,
) -> (InjectionReport, Option<LogError>) {
    let mut report = InjectionReport::default();
    let mut batch: Vec<(&[u8], Vec<u8>)> = Vec::with_capacity(MAX_BATCH);
    let mut i = 0;
    while i < events.len() {
        let limit = match speed {
            Speed::Max => events.len(),
            Speed::Realtime { speedup } => {
                let now = Instant::now();
                let next = due(start, first_arrival, events[i].arrival(), speedup);
                if next > now {
                    std::thread::sleep(next - now);
                }
                let now = Instant::now();
                events[i..]
                    .iter()
                    .position(|e| due(start, first_arrival, e.arrival(), speedup) > now)
                    .map_or(events.len(), |n| i + n)
            }
        };
        // One batch: consecutive events of the same kind, all due.
        let is_update = matches!(events[i], Envelope::Update { .. });
        batch.clear();
        while i < limit
            && batch.len() < MAX_BATCH
            && matches!(events[i], Envelope::Update { .. }) == is_update
        {
            batch.push((events[i].device().as_bytes(), events[i].encode()));
            i += 1;
        }
        let topic = if is_update { updates } else { measurements };
        if let Err(e) = topic.append_batch(partition, &batch) {
            return (report, Some(e));
        }
        if is_update {
            report.updates += batch.len() as u64;
        } else {
            report.measurements += batch.len() as u64;
        }
    }
    (report, None)
}
