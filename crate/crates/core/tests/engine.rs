mod common;

use std::sync::atomic::Ordering;
use std::time::Duration;

use common::*;
use tidewater::config::Platform;
use tidewater::engine::{CachedVersions, CheckpointDir, Engine, KillPoint, MissingPolicy, PartitionWorker, WorkerControl};
use tidewater::generator::{
    drive, generate_trace, AttributeSpec, DelayModel, FleetConfig, LateCommissioning, Speed, Trace,
    UpdateInterval,
};
use tidewater::wire::Envelope;
use tidewater::{AttributeKey, AttributeUpdate, AttributeVersion, DeviceId, Measurement, Provenance};

fn m(dev: &str, seq: u64, t: u64, arrival: u64) -> Envelope {
    Envelope::Measurement {
        arrival,
        record: Measurement {
            device: DeviceId::new(dev).unwrap(),
            seq,
            event_time: t,
            observable: "pressure".into(),
            value: seq as f64 / 4.0,
            ingest_time: 0,
        },
    }
}

fn u(dev: &str, attr: &str, valid_from: u64, value: &str, arrival: u64) -> Envelope {
    Envelope::Update {
        arrival,
        record: AttributeUpdate {
            key: AttributeKey::new(DeviceId::new(dev).unwrap(), attr).unwrap(),
            version: AttributeVersion::new(valid_from, value).unwrap(),
        },
    }
}

fn fleet(seed: u64) -> FleetConfig {
    FleetConfig {
        devices: 12,
        rate_hz: 5.0,
        duration_s: 40.0,
        attributes: vec![
            AttributeSpec::new("geolocation", 50, UpdateInterval::Exponential { mean_ms: 3_000.0 }),
            AttributeSpec::new("unit", 4, UpdateInterval::Fixed { ms: 7_000 }),
        ],
        delay: DelayModel::with_median(200.0, 1.5),
        late_commissioning: Some(LateCommissioning {
            fraction: 0.3,
            lag_ms: 1_500,
        }),
        seed,
        ..FleetConfig::default()
    }
}

#[test]
fn one_update_then_one_measurement() {
    let dir = tempfile::tempdir().unwrap();
    let attrs = names(&["unit"]);
    let trace = Trace::new(vec![u("d1", "unit", 100, "bar", 100), m("d1", 0, 150, 160)]);
    let run = run_backlog(platform(dir.path(), 2, &attrs), &trace, &[]);
    assert_eq!(run.output.enriched.len(), 1);
    assert_eq!(
        run.output.enriched[0].5,
        vec![("unit".to_string(), "bar".to_string(), Provenance::Current)]
    );
}

#[test]
fn missing_policies() {
    let attrs = names(&["unit", "geolocation"]);
    let trace = Trace::new(vec![
        u("d1", "unit", 100, "bar", 100),
        m("d1", 0, 150, 160),
        m("ghost", 0, 150, 170),
    ]);
    let dir = tempfile::tempdir().unwrap();
    let run = run_backlog(platform(dir.path(), 1, &attrs), &trace, &[]);
    assert!(run.output.enriched.is_empty());
    assert_eq!(run.output.dead, vec![("d1".into(), 0), ("ghost".into(), 0)]);

    let dir = tempfile::tempdir().unwrap();
    let mut c = platform(dir.path(), 1, &attrs);
    c.engine.missing_policy = MissingPolicy::EmitFlagged;
    let run = run_backlog(c, &trace, &[]);
    assert!(run.output.dead.is_empty());
    assert_eq!(run.output.enriched.len(), 2);
    let d1 = &run.output.enriched[0].5;
    assert_eq!(d1[0].2, Provenance::Current);
    assert_eq!(d1[1], ("geolocation".into(), String::new(), Provenance::Missing));
}

#[test]
fn matches_reference_scan() {
    let attrs = names(&["geolocation", "unit"]);
    for (seed, partitions) in [(1, 1), (2, 3), (3, 4)] {
        let trace = generate_trace(&fleet(seed)).unwrap();
        assert!(trace.out_of_order_fraction() > 0.05);
        for policy in [MissingPolicy::DeadLetter, MissingPolicy::EmitFlagged] {
            let dir = tempfile::tempdir().unwrap();
            let mut c = platform(dir.path(), partitions, &attrs);
            c.engine.missing_policy = policy;
            c.engine.batch_size = 37;
            let run = run_backlog(c, &trace, &[]);
            let expected = reference(&trace, &attrs, policy);
            assert_eq!(run.output, expected, "seed {seed}, {partitions} partitions, {policy:?}");
        }
    }
}

#[test]
fn all_provenances_occur_in_a_reordered_trace() {
    let attrs = names(&["geolocation", "unit"]);
    let trace = generate_trace(&fleet(9)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut c = platform(dir.path(), 2, &attrs);
    c.engine.missing_policy = MissingPolicy::EmitFlagged;
    let run = run_backlog(c, &trace, &[]);
    let mut seen = [0u64; 4];
    for r in &run.output.enriched {
        for a in &r.5 {
            seen[a.2 as usize] += 1;
        }
    }
    assert!(seen.iter().all(|&n| n > 0), "{seen:?}");
    let from_stats: [u64; 4] = run.reports.iter().fold([0; 4], |mut acc, r| {
        for (a, b) in acc.iter_mut().zip(r.stats.sink.provenance) {
            *a += b;
        }
        acc
    });
    assert_eq!(from_stats, seen);
}

#[test]
fn cache_matches_store_at_quiescence() {
    let attrs = names(&["geolocation", "unit"]);
    let trace = generate_trace(&fleet(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let run = run_backlog(platform(dir.path(), 3, &attrs), &trace, &[]);
    let store = &run.platform.store;
    let mut keys = 0;
    for r in &run.reports {
        for (key, cached) in r.final_state.entries() {
            assert_eq!(cached, CachedVersions::from_latest_two(store.get_latest_two(&key)));
            keys += 1;
        }
    }
    assert_eq!(keys, store.key_count());
}

#[test]
fn late_update_rebuilds_cache() {
    let attrs = names(&["unit"]);
    let trace = Trace::new(vec![
        u("d", "unit", 100, "A", 100),
        u("d", "unit", 200, "B", 200),
        u("d", "unit", 150, "X", 250),
        m("d", 0, 160, 260),
        m("d", 1, 120, 270),
    ]);
    let dir = tempfile::tempdir().unwrap();
    let run = run_backlog(platform(dir.path(), 1, &attrs), &trace, &[]);
    let vals: Vec<_> = run.output.enriched.iter().map(|r| r.5[0].clone()).collect();
    assert_eq!(
        vals,
        vec![
            ("unit".into(), "X".into(), Provenance::Previous),
            ("unit".into(), "A".into(), Provenance::Historical),
        ]
    );
    assert_eq!(run.reports[0].stats.cache_rebuilds, 1);
    assert_eq!(run.output, reference(&trace, &attrs, MissingPolicy::DeadLetter));
}

#[test]
fn conflicting_update_is_rejected_and_skipped() {
    let attrs = names(&["unit"]);
    let trace = Trace::new(vec![
        u("d", "unit", 100, "A", 100),
        u("d", "unit", 100, "Z", 150),
        m("d", 0, 160, 260),
    ]);
    let dir = tempfile::tempdir().unwrap();
    let run = run_backlog(platform(dir.path(), 1, &attrs), &trace, &[]);
    assert_eq!(run.reports[0].stats.updates_rejected, 1);
    assert_eq!(run.output.enriched[0].5[0].1, "A");
}

#[test]
fn in_order_trace_needs_no_historical_lookups() {
    let attrs = names(&["geolocation", "unit"]);
    let trace = generate_trace(&FleetConfig {
        devices: 20,
        rate_hz: 5.0,
        duration_s: 30.0,
        delay: DelayModel::with_median(50.0, 0.0),
        jitter: 0.0,
        loss: 0.0,
        attributes: vec![
            AttributeSpec::new("geolocation", 10, UpdateInterval::Never),
            AttributeSpec::new("unit", 10, UpdateInterval::Never),
        ],
        ..FleetConfig::default()
    })
    .unwrap();
    assert_eq!(trace.out_of_order_count(), 0);
    let dir = tempfile::tempdir().unwrap();
    let run = run_backlog(platform(dir.path(), 2, &attrs), &trace, &[]);
    let stats = run.platform.context.store.stats();
    assert_eq!(stats.get_at.load(Ordering::Relaxed), 0);
    assert_eq!(run.output.enriched.len(), trace.measurement_count());
}

#[test]
fn idle_worker_checkpoints_advance_epoch_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = platform(dir.path(), 1, &names(&["unit"]));
    c.engine.checkpoint_interval_ms = 20;
    let platform = Platform::open(c.clone()).unwrap();
    let engine = Engine::start(platform.context.clone(), &[]).unwrap();
    std::thread::sleep(Duration::from_millis(200));
    engine.stop();
    let reports = engine.join().unwrap();
    assert_eq!(reports[0].stats.sink.enriched, 0);
    let ckpts = CheckpointDir::new(&c.engine.checkpoint_dir, 0);
    let (latest, _) = ckpts.load_latest(0).unwrap();
    let latest = latest.unwrap();
    assert!(latest.epoch >= 3, "epoch {}", latest.epoch);
    assert_eq!(latest.measurement_offset.offset, 0);
    assert_eq!(latest.update_offset.offset, 0);
}

#[test]
fn checkpoint_records_consumed_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let c = platform(dir.path(), 1, &names(&["unit"]));
    let platform = Platform::open(c.clone()).unwrap();
    let mut events = Vec::new();
    for i in 0..10 {
        events.push(u("d", "unit", i * 1000, &format!("v{i}"), i * 1000));
        for j in 0..10 {
            let t = i * 1000 + j * 100 + 1;
            events.push(m("d", i * 10 + j, t, t));
        }
    }
    let t = &platform.context.topics;
    drive(&Trace::new(events), &t.measurements, &t.updates, Speed::Max).unwrap();

    let control = std::sync::Arc::new(WorkerControl::new());
    let ckpts = CheckpointDir::new(&c.engine.checkpoint_dir, 0);
    let mut w = PartitionWorker::recover(0, platform.context.clone(), control.clone()).unwrap();
    w.checkpoint().unwrap();
    let first = ckpts.load_latest(0).unwrap().0.unwrap();
    assert_eq!((first.epoch, first.measurement_offset.offset, first.update_offset.offset), (0, 0, 0));
    control.input_complete();
    w.run().unwrap();
    let last = ckpts.load_latest(0).unwrap().0.unwrap();
    assert_eq!((last.measurement_offset.offset, last.update_offset.offset), (100, 10));
    assert!(last.epoch > first.epoch);
    assert_eq!(last.results_offset.offset, 100);
}

#[test]
fn cold_start_loads_latest_two_from_store() {
    let dir = tempfile::tempdir().unwrap();
    let c = platform(dir.path(), 2, &names(&["unit"]));
    let platform = Platform::open(c).unwrap();
    for d in 0..20 {
        let key = AttributeKey::new(DeviceId::new(format!("d{d}")).unwrap(), "unit").unwrap();
        for t in 0..=(d % 4) {
            platform
                .store
                .put_version(&key, &AttributeVersion::new(t * 10, format!("v{t}")).unwrap())
                .unwrap();
        }
    }
    let control = std::sync::Arc::new(WorkerControl::new());
    let mut total = 0;
    for p in 0..2 {
        let w = PartitionWorker::recover(p, platform.context.clone(), control.clone()).unwrap();
        for (key, cached) in w.state().entries() {
            assert_eq!(cached, CachedVersions::from_latest_two(platform.store.get_latest_two(&key)));
            total += 1;
        }
    }
    assert_eq!(total, 20);
}

fn crash_free_and_crashed(kill: KillPoint, partition: u32) -> (Output, Output, u64) {
    let attrs = names(&["geolocation", "unit"]);
    let trace = generate_trace(&fleet(21)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut c = platform(&dir.path().join("a"), 2, &attrs);
    c.engine.checkpoint_every_records = Some(150);
    let clean = run_backlog(c, &trace, &[]);
    let mut c = platform(&dir.path().join("b"), 2, &attrs);
    c.engine.checkpoint_every_records = Some(150);
    let crashed = run_backlog(c, &trace, &[(partition, kill)]);
    let r = &crashed.reports[partition as usize];
    assert_eq!(r.restarts, 1, "{kill:?} never fired");
    (clean.output, crashed.output, r.replayed)
}

#[test]
fn crash_mid_interval_replays_and_matches() {
    let (clean, crashed, replayed) = crash_free_and_crashed(KillPoint::AfterMeasurements(400), 0);
    assert_eq!(clean, crashed);
    assert_eq!(replayed, 100);
}

#[test]
fn crash_right_after_checkpoint_replays_nothing() {
    let (clean, crashed, replayed) = crash_free_and_crashed(KillPoint::AfterCheckpoint(2), 1);
    assert_eq!(clean, crashed);
    assert_eq!(replayed, 0);
}

#[test]
fn crash_during_checkpoint_write_matches() {
    let (clean, crashed, replayed) = crash_free_and_crashed(KillPoint::MidCheckpoint(3), 0);
    assert_eq!(clean, crashed);
    assert_eq!(replayed, 150);
}

#[test]
fn crash_after_update_matches() {
    let (clean, crashed, _) = crash_free_and_crashed(KillPoint::AfterUpdates(30), 1);
    assert_eq!(clean, crashed);
}

#[test]
fn corrupt_checkpoint_falls_back_and_still_matches() {
    let attrs = names(&["geolocation", "unit"]);
    let trace = generate_trace(&fleet(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut c = platform(dir.path(), 1, &attrs);
    c.engine.checkpoint_every_records = Some(200);
    let platform = Platform::open(c.clone()).unwrap();
    let t = &platform.context.topics;
    drive(&trace, &t.measurements, &t.updates, Speed::Max).unwrap();

    let control = std::sync::Arc::new(WorkerControl::new());
    control.input_complete();
    let mut w = PartitionWorker::recover(0, platform.context.clone(), control.clone())
        .unwrap()
        .with_kill_point(Some(KillPoint::AfterMeasurements(1_100)));
    assert!(matches!(w.run(), Err(tidewater::engine::EngineError::Killed { .. })));
    let ckpts = CheckpointDir::new(&c.engine.checkpoint_dir, 0);
    assert_eq!(ckpts.epochs().unwrap(), [4, 3, 2]);
    std::fs::write(ckpts.path().join("ckpt-4"), b"torn").unwrap();

    let w = PartitionWorker::recover(0, platform.context.clone(), control).unwrap();
    assert_eq!(w.recovered_from().unwrap().epoch, 3);
    assert_eq!(w.measurement_offset(), 800);
    drop(w);
    // Crash again right after the first checkpoint past the fallback point,
    // while outputs of the first incarnation are still ahead of replay.
    let reports = Engine::start(platform.context.clone(), &[(0, KillPoint::AfterCheckpoint(4))])
        .unwrap()
        .finish()
        .unwrap();
    assert_eq!(reports[0].restarts, 1);
    assert_eq!(
        collect(&t.results, &t.dead_letter),
        reference(&trace, &attrs, c.engine.missing_policy)
    );
}

#[test]
fn store_outage_is_retried_not_dropped() {
    let attrs = names(&["geolocation", "unit"]);
    let trace = generate_trace(&fleet(6)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let c = platform(dir.path(), 2, &attrs);
    let platform = Platform::open(c).unwrap();
    let t = &platform.context.topics;
    drive(&trace, &t.measurements, &t.updates, Speed::Max).unwrap();
    platform.context.store.set_available(false);
    let engine = Engine::start(platform.context.clone(), &[]).unwrap();
    std::thread::sleep(Duration::from_millis(150));
    platform.context.store.set_available(true);
    let reports = engine.finish().unwrap();
    assert!(reports.iter().map(|r| r.stats.store_retries).sum::<u64>() > 0);
    assert_eq!(
        collect(&t.results, &t.dead_letter),
        reference(&trace, &attrs, MissingPolicy::DeadLetter)
    );
}
