//! Per-run measurements: windowed throughput, latency percentiles, warm-up.

use serde::{Deserialize, Serialize};
use tidewater::{EnrichedMeasurement, Millis, Provenance};

pub const WINDOW_MS: u64 = 1_000;
pub const DEFAULT_WARMUP_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceCounts {
    pub current: u64,
    pub previous: u64,
    pub historical: u64,
    pub missing: u64,
}

impl ProvenanceCounts {
    pub fn add(&mut self, p: Provenance) {
        match p {
            Provenance::Current => self.current += 1,
            Provenance::Previous => self.previous += 1,
            Provenance::Historical => self.historical += 1,
            Provenance::Missing => self.missing += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.current + self.previous + self.historical + self.missing
    }

    /// Attributes resolved by the store rather than local memory.
    pub fn store_lookups(&self) -> u64 {
        self.historical + self.missing
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    /// Seconds since the run started.
    pub start_s: f64,
    pub records: u64,
    pub records_per_s: f64,
    pub max_latency_ms: u64,
    pub provenance: ProvenanceCounts,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50_ms: u64,
    pub p95_ms: u64,
    pub p99_ms: u64,
    pub mean_ms: f64,
    pub max_ms: u64,
}

impl Percentiles {
    /// Nearest-rank percentiles over a full sort.
    pub fn of(samples: &mut [u64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        samples.sort_unstable();
        let rank = |q: f64| {
            let n = samples.len();
            let r = (q * n as f64).ceil() as usize;
            samples[r.clamp(1, n) - 1]
        };
        Self {
            p50_ms: rank(0.50),
            p95_ms: rank(0.95),
            p99_ms: rank(0.99),
            mean_ms: samples.iter().sum::<u64>() as f64 / samples.len() as f64,
            max_ms: samples[samples.len() - 1],
        }
    }
}

/// One line of a metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub partitions: u32,
    pub attributes: usize,
    pub seed: u64,
    pub run: u32,
    pub mode: String,
    /// Wall-clock seconds from engine start to the last worker exiting.
    pub duration_s: f64,
    pub enriched: u64,
    pub dead_lettered: u64,
    pub latency_samples: u64,
    pub latency: Percentiles,
    pub provenance: ProvenanceCounts,
    pub warmup_threshold: f64,
    /// Start of the first window from which every window stays under the
    /// store lookup threshold; `None` if no such window exists.
    pub warmup_s: Option<f64>,
    /// Historical lookups in windows at or after warm-up.
    pub historical_after_warmup: u64,
    pub mean_tps: f64,
    pub throughput: Vec<Window>,
}

impl RunMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Folds enriched records into windows and latency samples.
#[derive(Debug)]
pub struct Collector {
    start_ms: Millis,
    attributes: usize,
    windows: Vec<(u64, u64, ProvenanceCounts)>,
    latencies: Vec<u64>,
    provenance: ProvenanceCounts,
    last_ms: Millis,
}

impl Collector {
    pub fn new(start_ms: Millis, attributes: usize) -> Self {
        Self {
            start_ms,
            attributes,
            windows: Vec::new(),
            latencies: Vec::new(),
            provenance: ProvenanceCounts::default(),
            last_ms: start_ms,
        }
    }

    pub fn record(&mut self, e: &EnrichedMeasurement) {
        let idx = (e.enrich_time.saturating_sub(self.start_ms) / WINDOW_MS) as usize;
        if self.windows.len() <= idx {
            self.windows.resize(idx + 1, (0, 0, ProvenanceCounts::default()));
        }
        let w = &mut self.windows[idx];
        w.0 += 1;
        w.1 = w.1.max(e.latency_ms);
        for a in &e.attributes {
            w.2.add(a.provenance);
            self.provenance.add(a.provenance);
        }
        self.latencies.push(e.latency_ms);
        self.last_ms = self.last_ms.max(e.enrich_time);
    }

    /// `end_ms` is the wall clock when the run finished.
    pub fn finish(mut self, meta: RunMeta, end_ms: Millis, threshold: f64) -> RunMetrics {
        let enriched = self.latencies.len() as u64;
        let latency = Percentiles::of(&mut self.latencies);
        let elapsed_ms = end_ms.max(self.last_ms).saturating_sub(self.start_ms);
        let throughput: Vec<Window> = self
            .windows
            .iter()
            .enumerate()
            .map(|(i, (n, max, p))| Window {
                start_s: (i as u64 * WINDOW_MS) as f64 / 1000.0,
                records: *n,
                records_per_s: *n as f64 * 1000.0 / WINDOW_MS as f64,
                max_latency_ms: *max,
                provenance: *p,
            })
            .collect();
        let warmup = warmup_window(&throughput, threshold);
        let historical_after_warmup = warmup
            .map(|w| throughput[w..].iter().map(|x| x.provenance.historical).sum())
            .unwrap_or(self.provenance.historical);
        // Windows entirely inside the run; the last one is usually partial.
        let full = (elapsed_ms / WINDOW_MS) as usize;
        let steady = &throughput[warmup.unwrap_or(0).min(full)..full.min(throughput.len())];
        let mean_tps = if steady.is_empty() {
            enriched as f64 * 1000.0 / elapsed_ms.max(1) as f64
        } else {
            steady.iter().map(|w| w.records_per_s).sum::<f64>() / steady.len() as f64
        };
        debug_assert_eq!(self.provenance.total(), enriched * self.attributes as u64);
        RunMetrics {
            partitions: meta.partitions,
            attributes: self.attributes,
            seed: meta.seed,
            run: meta.run,
            mode: meta.mode,
            duration_s: elapsed_ms as f64 / 1000.0,
            enriched,
            dead_lettered: meta.dead_lettered,
            latency_samples: enriched,
            latency,
            provenance: self.provenance,
            warmup_threshold: threshold,
            warmup_s: warmup.map(|w| throughput[w].start_s),
            historical_after_warmup,
            mean_tps,
            throughput,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunMeta {
    pub partitions: u32,
    pub seed: u64,
    pub run: u32,
    pub mode: String,
    pub dead_lettered: u64,
}

/// Index of the first window after which every window has output and a store
/// lookup rate below `threshold`.
pub fn warmup_window(windows: &[Window], threshold: f64) -> Option<usize> {
    let ok = |w: &Window| {
        let total = w.provenance.total();
        w.records > 0 && (total == 0 || (w.provenance.store_lookups() as f64) < threshold * total as f64)
    };
    let mut first = None;
    for (i, w) in windows.iter().enumerate().rev() {
        if !ok(w) {
            break;
        }
        first = Some(i);
    }
    first
}

#[cfg(test)]
mod tests {
    use super::*;
    use tidewater::{DeviceId, EnrichedAttribute, Measurement};

    fn rec(enrich_time: u64, latency: u64, p: Provenance) -> EnrichedMeasurement {
        EnrichedMeasurement {
            measurement: Measurement {
                device: DeviceId::new("d").unwrap(),
                seq: 0,
                event_time: 0,
                observable: "flow".into(),
                value: 0.0,
                ingest_time: enrich_time - latency,
            },
            attributes: vec![EnrichedAttribute {
                name: "unit".into(),
                value: "x".into(),
                provenance: p,
            }],
            enrich_time,
            latency_ms: latency,
        }
    }

    #[test]
    fn nearest_rank_percentiles() {
        let mut v: Vec<u64> = (1..=100).rev().collect();
        let p = Percentiles::of(&mut v);
        assert_eq!((p.p50_ms, p.p95_ms, p.p99_ms, p.max_ms), (50, 95, 99, 100));
        assert_eq!(p.mean_ms, 50.5);
        let p = Percentiles::of(&mut [7]);
        assert_eq!((p.p50_ms, p.p99_ms), (7, 7));
        assert_eq!(Percentiles::of(&mut []), Percentiles::default());
    }

    #[test]
    fn warmup_is_first_window_of_the_clean_suffix() {
        let mut c = Collector::new(10_000, 1);
        // Window 0 and 2 have store lookups, 1 is clean, 3..5 are clean.
        for (t, p) in [
            (10_100, Provenance::Historical),
            (11_100, Provenance::Current),
            (12_100, Provenance::Missing),
            (13_100, Provenance::Current),
            (14_100, Provenance::Previous),
            (15_100, Provenance::Current),
        ] {
            c.record(&rec(t, 5, p));
        }
        let m = c.finish(RunMeta::default(), 16_000, 0.01);
        assert_eq!(m.warmup_s, Some(3.0));
        assert_eq!(m.historical_after_warmup, 0);
        assert_eq!(m.provenance.total(), 6);
        assert_eq!(m.latency_samples, 6);
        // Windows 3, 4 and 5 are complete and steady.
        assert_eq!(m.mean_tps, 1.0);
    }

    #[test]
    fn no_warmup_when_last_window_misses() {
        let mut c = Collector::new(0, 1);
        c.record(&rec(100, 1, Provenance::Current));
        c.record(&rec(1_100, 1, Provenance::Historical));
        let m = c.finish(RunMeta::default(), 1_500, 0.01);
        assert_eq!(m.warmup_s, None);
        assert_eq!(m.historical_after_warmup, 1);
        // Only window 0 is complete.
        assert_eq!(m.mean_tps, 1.0);
    }

    #[test]
    fn short_run_falls_back_to_total_rate() {
        let mut c = Collector::new(0, 1);
        for t in [10, 20, 30, 40] {
            c.record(&rec(t, 1, Provenance::Current));
        }
        let m = c.finish(RunMeta::default(), 500, 0.01);
        assert_eq!(m.mean_tps, 8.0);
    }

    #[test]
    fn json_line_round_trips() {
        let mut c = Collector::new(0, 1);
        c.record(&rec(10, 3, Provenance::Current));
        let m = c.finish(RunMeta { partitions: 2, ..RunMeta::default() }, 1_000, 0.01);
        let back: RunMetrics = serde_json::from_str(&m.to_json_line()).unwrap();
        assert_eq!(back, m);
    }
}
