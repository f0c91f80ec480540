//! Timed engine runs over a generated trace.

use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Duration;

use anyhow::{bail, Context};
use tidewater::config::{Platform, PlatformConfig};
use tidewater::engine::{Engine, KillPoint, WorkerReport};
use tidewater::generator::{drive, InjectionReport, Speed, Trace};
use tidewater::model::now_millis;

use crate::metrics::{Collector, RunMeta, RunMetrics, DEFAULT_WARMUP_THRESHOLD};
use crate::output::{collect, for_each_enriched, Output};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Injection {
    /// Append the whole trace, then start the engine on the backlog.
    Backlog,
    /// Start the engine, then append measurements at `rate` per second,
    /// keeping the trace's relative arrival times.
    Paced { rate: f64 },
}

impl Injection {
    pub fn name(&self) -> &'static str {
        match self {
            Injection::Backlog => "backlog",
            Injection::Paced { .. } => "paced",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Engine, store and log settings. Paths are replaced per run.
    pub platform: PlatformConfig,
    pub runs: u32,
    /// Workers are stopped after this long even if input remains.
    pub duration_cap: Option<Duration>,
    pub injection: Injection,
    pub warmup_threshold: f64,
    /// Recorded in the metrics; the trace is supplied by the caller.
    pub seed: u64,
    /// Parent for per-run directories; a temporary directory if `None`.
    pub workdir: Option<PathBuf>,
    /// Keep the per-run directories under `workdir`.
    pub keep: bool,
}

impl RunConfig {
    pub fn new(platform: PlatformConfig) -> Self {
        Self {
            platform,
            runs: 1,
            duration_cap: None,
            injection: Injection::Backlog,
            warmup_threshold: DEFAULT_WARMUP_THRESHOLD,
            seed: 0,
            workdir: None,
            keep: false,
        }
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub metrics: RunMetrics,
    pub reports: Vec<WorkerReport>,
    pub injection: InjectionReport,
    /// Whether the duration cap stopped the workers before the input ran out.
    pub capped: bool,
}

/// Points every path of `template` into `dir`. An in-memory store stays in
/// memory.
pub fn place(template: &PlatformConfig, dir: &Path) -> PlatformConfig {
    let mut c = template.clone();
    c.engine.checkpoint_dir = dir.join("checkpoints");
    c.log.root = dir.join("log");
    if c.store.journal_path.is_some() {
        c.store.journal_path = Some(dir.join("store.journal"));
    }
    c
}

/// A scratch directory that is removed on drop unless kept.
pub struct RunDir {
    path: PathBuf,
    _temp: Option<tempfile::TempDir>,
}

impl RunDir {
    pub fn new(parent: Option<&Path>, name: &str, keep: bool) -> anyhow::Result<Self> {
        match parent {
            Some(p) if keep => {
                let path = p.join(name);
                if path.exists() {
                    std::fs::remove_dir_all(&path)
                        .with_context(|| format!("clearing {}", path.display()))?;
                }
                std::fs::create_dir_all(&path)?;
                Ok(Self { path, _temp: None })
            }
            Some(p) => {
                std::fs::create_dir_all(p)?;
                let t = tempfile::Builder::new().prefix(name).tempdir_in(p)?;
                Ok(Self { path: t.path().to_owned(), _temp: Some(t) })
            }
            None => {
                let t = tempfile::Builder::new().prefix(name).tempdir()?;
                Ok(Self { path: t.path().to_owned(), _temp: Some(t) })
            }
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Speedup that makes a paced replay of `trace` deliver `rate` measurements
/// per second.
pub fn speedup_for_rate(trace: &Trace, rate: f64) -> f64 {
    let arrivals: Vec<u64> = trace.measurements().map(|(a, _)| a).collect();
    let (Some(first), Some(last)) = (arrivals.iter().min(), arrivals.iter().max()) else {
        return 1.0;
    };
    let span_s = (last - first).max(1) as f64 / 1000.0;
    let natural = arrivals.len() as f64 / span_s;
    rate / natural
}

/// Attribute names in order of first appearance among the trace's updates.
pub fn trace_attribute_names(trace: &Trace) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for (_, u) in trace.updates() {
        if !names.contains(&u.key.attribute) {
            names.push(u.key.attribute.clone());
        }
    }
    names
}

/// Runs the engine once over `trace` in `dir`, optionally injecting crashes.
pub fn run_in(
    cfg: &RunConfig,
    trace: &Trace,
    dir: &Path,
    run: u32,
    kills: &[(u32, KillPoint)],
) -> anyhow::Result<(RunOutcome, Platform)> {
    let platform = Platform::open(place(&cfg.platform, dir)).context("opening platform")?;
    let topics = platform.context.topics.clone();
    if topics.measurements.total_records() + topics.updates.total_records() > 0 {
        bail!("input topics in {} are not empty", dir.display());
    }
    let backlog = cfg.injection == Injection::Backlog;
    let mut injection = InjectionReport::default();
    if backlog {
        injection = drive(trace, &topics.measurements, &topics.updates, Speed::Max)?;
    }
    let engine = Engine::start(platform.context.clone(), kills)?;
    let start_ms = now_millis();
    let (done, stopped) = mpsc::channel::<()>();
    let (capped_tx, capped_rx) = mpsc::channel::<bool>();
    let timer = cfg.duration_cap.map(|cap| {
        let control = engine.control().clone();
        std::thread::spawn(move || {
            let hit = stopped.recv_timeout(cap) == Err(mpsc::RecvTimeoutError::Timeout);
            if hit {
                control.stop();
            }
            let _ = capped_tx.send(hit);
        })
    });
    if let Injection::Paced { rate } = cfg.injection {
        let speedup = speedup_for_rate(trace, rate);
        log::info!("pacing at {rate:.0} measurements/s (speedup {speedup:.2})");
        injection = drive(trace, &topics.measurements, &topics.updates, Speed::Realtime { speedup })?;
    }
    let reports = engine.finish();
    let end_ms = now_millis();
    drop(done);
    let capped = match timer {
        Some(t) => {
            t.join().expect("timer thread");
            capped_rx.recv().unwrap_or(false)
        }
        None => false,
    };
    let reports = reports.context("engine failed")?;
    let attributes = cfg.platform.engine.enrichment_attributes.len();
    let mut collector = Collector::new(start_ms, attributes);
    for_each_enriched(&topics.results, |e| collector.record(&e))?;
    let dead_lettered = reports.iter().map(|r| r.stats.sink.dead_lettered).sum();
    let meta = RunMeta {
        partitions: cfg.platform.engine.partitions,
        seed: cfg.seed,
        run,
        mode: cfg.injection.name().to_owned(),
        dead_lettered,
    };
    let metrics = collector.finish(meta, end_ms, cfg.warmup_threshold);
    Ok((
        RunOutcome {
            metrics,
            reports,
            injection,
            capped,
        },
        platform,
    ))
}

/// Runs `cfg.runs` times over the same trace, each in a fresh directory.
pub fn cmd_run(cfg: &RunConfig, trace: &Trace) -> anyhow::Result<Vec<RunOutcome>> {
    let mut out = Vec::new();
    for run in 0..cfg.runs {
        let name = format!(
            "run-n{}-k{}-{run}",
            cfg.platform.engine.partitions,
            cfg.platform.engine.enrichment_attributes.len()
        );
        let dir = RunDir::new(cfg.workdir.as_deref(), &name, cfg.keep)?;
        let (outcome, _) = run_in(cfg, trace, dir.path(), run, &[])
            .with_context(|| format!("run {run} failed in {}", dir.path().display()))?;
        log::info!(
            "run {run}: {} enriched in {:.1} s, {:.0} records/s, p50 {} ms",
            outcome.metrics.enriched,
            outcome.metrics.duration_s,
            outcome.metrics.mean_tps,
            outcome.metrics.latency.p50_ms
        );
        out.push(outcome);
    }
    Ok(out)
}

/// Runs the engine over the whole backlog and returns its deduplicated
/// output.
pub fn engine_output(
    cfg: &RunConfig,
    trace: &Trace,
    kills: &[(u32, KillPoint)],
) -> anyhow::Result<(Output, RunOutcome)> {
    let dir = RunDir::new(cfg.workdir.as_deref(), "engine", false)?;
    let mut cfg = cfg.clone();
    cfg.injection = Injection::Backlog;
    cfg.duration_cap = None;
    let (outcome, platform) = run_in(&cfg, trace, dir.path(), 0, kills)?;
    let t = &platform.context.topics;
    Ok((collect(&t.results, &t.dead_letter)?, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tidewater::generator::{generate_trace, FleetConfig};

    fn small() -> (RunConfig, Trace) {
        let fleet = FleetConfig {
            devices: 10,
            duration_s: 20.0,
            ..FleetConfig::with_attribute_count(2)
        };
        let mut platform = PlatformConfig::default();
        platform.engine.partitions = 2;
        platform.engine.enrichment_attributes = fleet.attribute_names();
        platform.store.simulated_latency_ms = 0;
        platform.log.fsync = false;
        (RunConfig::new(platform), generate_trace(&fleet).unwrap())
    }

    #[test]
    fn tiny_backlog_run_accounts_for_every_record() {
        let (cfg, trace) = small();
        let outs = cmd_run(&cfg, &trace).unwrap();
        assert_eq!(outs.len(), 1);
        let m = &outs[0].metrics;
        assert_eq!(m.enriched + m.dead_lettered, trace.measurement_count() as u64);
        assert_eq!(m.latency_samples, m.enriched);
        assert_eq!(m.provenance.total(), m.enriched * 2);
        assert!(m.latency.p50_ms <= m.latency.p95_ms && m.latency.p95_ms <= m.latency.p99_ms);
        assert!(!outs[0].capped);
    }

    #[test]
    fn duration_cap_stops_the_workers() {
        let (mut cfg, _) = small();
        let trace = generate_trace(&FleetConfig {
            devices: 500,
            duration_s: 600.0,
            ..FleetConfig::with_attribute_count(2)
        })
        .unwrap();
        cfg.platform.store.simulated_latency_ms = 1;
        cfg.duration_cap = Some(Duration::from_millis(20));
        let out = cmd_run(&cfg, &trace).unwrap().remove(0);
        assert!(out.capped);
        assert!(out.metrics.enriched < trace.measurement_count() as u64);
    }

    #[test]
    fn speedup_matches_requested_rate() {
        let (_, trace) = small();
        // Ten devices at 1 Hz deliver about ten measurements per second.
        let s = speedup_for_rate(&trace, 100.0);
        assert!((9.0..11.0).contains(&s), "speedup {s}");
    }
}
