//! Runs one worker thread per partition and restarts crashed workers.

use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use super::state::LocalAttributeState;
use super::worker::{EngineContext, KillPoint, PartitionWorker, WorkerControl, WorkerStats};
use super::EngineError;

/// Restarts allowed per partition for failures other than injected kills.
pub const MAX_RESTARTS: u32 = 5;
const RESTART_BACKOFF: Duration = Duration::from_millis(50);

/// What one partition did over all of its worker incarnations.
#[derive(Debug, Clone)]
pub struct WorkerReport {
    pub partition: u32,
    pub stats: WorkerStats,
    pub restarts: u32,
    /// Measurements consumed again after recovery.
    pub replayed: u64,
    /// Cache contents when the last incarnation exited.
    pub final_state: LocalAttributeState,
    pub measurement_offset: u64,
    pub update_offset: u64,
}

/// A running engine.
#[derive(Debug)]
pub struct Engine {
    control: Arc<WorkerControl>,
    threads: Vec<JoinHandle<Result<WorkerReport, EngineError>>>,
}

impl Engine {
    /// Spawns a supervised worker for every partition. `kills` injects one
    /// crash into the first incarnation of the listed partitions.
    pub fn start(ctx: EngineContext, kills: &[(u32, KillPoint)]) -> Result<Self, EngineError> {
        ctx.config.validate()?;
        let control = Arc::new(WorkerControl::new());
        let mut threads = Vec::new();
        for p in 0..ctx.config.partitions {
            let kill = kills.iter().find(|(kp, _)| *kp == p).map(|(_, k)| *k);
            let ctx = ctx.clone();
            let control = control.clone();
            let handle = std::thread::Builder::new()
                .name(format!("worker-{p}"))
                .spawn(move || supervise(p, ctx, control, kill))
                .map_err(EngineError::Spawn)?;
            threads.push(handle);
        }
        Ok(Self { control, threads })
    }

    pub fn control(&self) -> &Arc<WorkerControl> {
        &self.control
    }

    /// Lets workers exit once all appended input is consumed.
    pub fn input_complete(&self) {
        self.control.input_complete();
    }

    pub fn stop(&self) {
        self.control.stop();
    }

    /// Waits for every worker. Returns the first failure, if any.
    pub fn join(self) -> Result<Vec<WorkerReport>, EngineError> {
        let mut reports = Vec::with_capacity(self.threads.len());
        let mut failure = None;
        for t in self.threads {
            match t.join() {
                Ok(Ok(r)) => reports.push(r),
                Ok(Err(e)) => {
                    self.control.stop();
                    failure.get_or_insert(e);
                }
                Err(_) => {
                    self.control.stop();
                    failure.get_or_insert(EngineError::Panicked);
                }
            }
        }
        match failure {
            Some(e) => Err(e),
            None => Ok(reports),
        }
    }

    /// Marks input complete and waits for every worker to drain it.
    pub fn finish(self) -> Result<Vec<WorkerReport>, EngineError> {
        self.input_complete();
        self.join()
    }
}

fn supervise(
    partition: u32,
    ctx: EngineContext,
    control: Arc<WorkerControl>,
    mut kill: Option<KillPoint>,
) -> Result<WorkerReport, EngineError> {
    let mut stats = WorkerStats::default();
    let mut restarts = 0;
    let mut replayed = 0;
    let mut crashed_at: Option<u64> = None;
    loop {
        let mut worker = match PartitionWorker::recover(partition, ctx.clone(), control.clone()) {
            Ok(w) => w.with_kill_point(kill.take()),
            Err(e) if restarts < MAX_RESTARTS && !matches!(e, EngineError::Interrupted) => {
                log::error!("partition {partition}: recovery failed: {e}");
                restarts += 1;
                std::thread::sleep(RESTART_BACKOFF);
                continue;
            }
            Err(e) => return Err(e),
        };
        if let Some(at) = crashed_at.take() {
            replayed += at.saturating_sub(worker.measurement_offset());
        }
        let result = worker.run();
        stats.merge(&worker.stats());
        match result {
            Ok(()) => {
                return Ok(WorkerReport {
                    partition,
                    stats,
                    restarts,
                    replayed,
                    measurement_offset: worker.measurement_offset(),
                    update_offset: worker.update_offset(),
                    final_state: worker.into_state(),
                })
            }
            Err(EngineError::Killed { measurement_offset }) => {
                log::info!("partition {partition}: killed at measurement offset {measurement_offset}");
                crashed_at = Some(measurement_offset);
                restarts += 1;
            }
            Err(e) if restarts < MAX_RESTARTS && !matches!(e, EngineError::Interrupted) => {
                log::error!("partition {partition}: worker failed, restarting: {e}");
                crashed_at = Some(worker.measurement_offset());
                restarts += 1;
                std::thread::sleep(RESTART_BACKOFF);
            }
            Err(e) => return Err(e),
        }
    }
}
