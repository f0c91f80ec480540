//! Differential crash testing: a crash-free run against runs with one
//! injected worker crash each.

use std::fmt;
use std::time::Duration;

use serde::Serialize;
use tidewater::engine::KillPoint;
use tidewater::generator::Trace;

use crate::output::Output;
use crate::run::{engine_output, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Kill {
    pub partition: u32,
    pub point: KillPoint,
}

impl fmt::Display for Kill {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.partition;
        match self.point {
            KillPoint::AfterMeasurements(n) => write!(f, "p{p} after {n} measurements"),
            KillPoint::AfterUpdates(n) => write!(f, "p{p} after {n} updates"),
            KillPoint::MidCheckpoint(e) => write!(f, "p{p} during checkpoint {e}"),
            KillPoint::AfterCheckpoint(e) => write!(f, "p{p} after checkpoint {e}"),
            KillPoint::AfterElapsed(d) => write!(f, "p{p} after {} ms", d.as_millis()),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct KillOutcome {
    pub kill: String,
    pub pass: bool,
    pub restarts: u32,
    pub replayed: u64,
    pub suppressed: u64,
    pub divergence: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CrashVerdict {
    pub records: usize,
    pub outcomes: Vec<KillOutcome>,
}

impl CrashVerdict {
    pub fn pass(&self) -> bool {
        self.outcomes.iter().all(|o| o.pass)
    }
}

impl fmt::Display for CrashVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for o in &self.outcomes {
            write!(
                f,
                "{} {:<32} restarts={} replayed={} suppressed={}",
                if o.pass { "PASS" } else { "FAIL" },
                o.kill,
                o.restarts,
                o.replayed,
                o.suppressed
            )?;
            if let Some(d) = &o.divergence {
                write!(f, "\n     first divergence: {d}")?;
            }
            writeln!(f)?;
        }
        write!(
            f,
            "{}: {} kill points, {} records",
            if self.pass() { "PASS" } else { "FAIL" },
            self.outcomes.len(),
            self.records
        )
    }
}

/// Runs `trace` once without faults and once per kill, comparing the
/// deduplicated outputs.
pub fn cmd_crashtest(cfg: &RunConfig, trace: &Trace, kills: &[Kill]) -> anyhow::Result<CrashVerdict> {
    let (baseline, _) = engine_output(cfg, trace, &[])?;
    crashtest_against(cfg, trace, kills, &baseline)
}

/// Like [`cmd_crashtest`] with a precomputed expected output.
pub fn crashtest_against(
    cfg: &RunConfig,
    trace: &Trace,
    kills: &[Kill],
    expected: &Output,
) -> anyhow::Result<CrashVerdict> {
    let mut outcomes = Vec::new();
    for k in kills {
        let (out, run) = engine_output(cfg, trace, &[(k.partition, k.point)])?;
        let divergence = expected.first_divergence(&out);
        let report = run.reports.iter().find(|r| r.partition == k.partition);
        let outcome = KillOutcome {
            kill: k.to_string(),
            pass: divergence.is_none(),
            restarts: report.map_or(0, |r| r.restarts),
            replayed: report.map_or(0, |r| r.replayed),
            suppressed: run.reports.iter().map(|r| r.stats.sink.suppressed).sum(),
            divergence,
        };
        log::info!("{}: {}", outcome.kill, if outcome.pass { "PASS" } else { "FAIL" });
        outcomes.push(outcome);
    }
    Ok(CrashVerdict {
        records: expected.len(),
        outcomes,
    })
}

/// Kill points spread over one partition's input: before any input, after
/// measurement and update counts, and around checkpoints.
pub fn sweep(partition: u32, measurements: u64, updates: u64, checkpoints: u64) -> Vec<Kill> {
    let mut points = vec![KillPoint::AfterElapsed(Duration::ZERO)];
    for i in 1..=4 {
        points.push(KillPoint::AfterMeasurements(measurements * i / 5));
    }
    for i in 1..=2 {
        points.push(KillPoint::AfterUpdates((updates * i / 3).max(1)));
    }
    let last = checkpoints.max(2);
    for e in [1, last / 2, last] {
        points.push(KillPoint::MidCheckpoint(e.max(1)));
    }
    points.push(KillPoint::AfterCheckpoint((last / 2).max(1)));
    points.dedup();
    points
        .into_iter()
        .map(|point| Kill { partition, point })
        .collect()
}
