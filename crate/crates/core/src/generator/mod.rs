//! Seeded water-grid telemetry traces.
//!
//! A [`FleetConfig`] describes a fleet of devices reading sensors on a
//! regular grid, the attributes announced for each device, and a lossy,
//! delaying transport. [`generate_trace`] turns it into a [`Trace`]: every
//! surviving measurement and every attribute update, ordered by arrival.
//!
//! All randomness comes from xoshiro256++ seeded through SplitMix64
//! (`Xoshiro256PlusPlus::seed_from_u64`), drawn in a fixed order: devices in
//! index order, for each device its attributes in configured order, then its
//! measurements. The same config therefore always yields the same trace.

mod drive;
mod trace;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Exp, LogNormal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    AttributeKey, AttributeUpdate, AttributeVersion, DeviceId, Measurement, Millis,
};
use crate::wire::Envelope;

pub use drive::{drive, DriveError, InjectionReport, Speed};
pub use trace::{read_trace, write_trace, Trace, TraceError};

/// Default first event time, 2020-09-13T12:26:40Z.
pub const DEFAULT_START_MS: Millis = 1_600_000_000_000;

/// Attribute names used by [`FleetConfig::with_attribute_count`].
pub const ATTRIBUTE_NAMES: [&str; 8] = [
    "geolocation",
    "unit",
    "device_type",
    "district",
    "firmware",
    "owner",
    "pipe_material",
    "installation",
];

/// How often an attribute changes after its initial announcement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UpdateInterval {
    Never,
    Fixed { ms: u64 },
    /// Exponentially distributed gaps with the given mean.
    Exponential { mean_ms: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    /// Values are `<prefix><n>` with `n` uniform below `cardinality`.
    pub prefix: String,
    pub cardinality: u32,
    pub interval: UpdateInterval,
}

impl AttributeSpec {
    pub fn new(name: &str, cardinality: u32, interval: UpdateInterval) -> Self {
        Self {
            name: name.to_owned(),
            prefix: format!("{name}-"),
            cardinality,
            interval,
        }
    }
}

/// Lognormal transport delay in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayModel {
    pub mu: f64,
    pub sigma: f64,
}

impl DelayModel {
    /// Median 200 ms, sigma 1.
    pub fn standard() -> Self {
        Self::with_median(200.0, 1.0)
    }

    pub fn with_median(median_ms: f64, sigma: f64) -> Self {
        Self {
            mu: median_ms.ln(),
            sigma,
        }
    }
}

/// Announcements of selected attribute keys reach the platform `lag_ms`
/// after they take effect, so measurements already delivered by then were
/// enriched with an older value, or none.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LateCommissioning {
    /// Fraction of attribute keys affected.
    pub fraction: f64,
    pub lag_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FleetConfig {
    pub devices: u32,
    pub rate_hz: f64,
    pub duration_s: f64,
    pub attributes: Vec<AttributeSpec>,
    pub delay: DelayModel,
    /// Probability that a measurement is lost in transport.
    pub loss: f64,
    pub seed: u64,
    pub start_ms: Millis,
    /// Event-time jitter as a fraction of the sampling period, in `[0, 1)`.
    pub jitter: f64,
    pub observables: Vec<String>,
    pub late_commissioning: Option<LateCommissioning>,
}

impl Default for FleetConfig {
    fn default() -> Self {
        Self {
            devices: 100,
            rate_hz: 1.0,
            duration_s: 60.0,
            attributes: vec![
                AttributeSpec::new(
                    "geolocation",
                    10_000,
                    UpdateInterval::Exponential { mean_ms: 600_000.0 },
                ),
                AttributeSpec::new("unit", 8, UpdateInterval::Never),
            ],
            delay: DelayModel::standard(),
            loss: 0.02,
            seed: 0,
            start_ms: DEFAULT_START_MS,
            jitter: 0.1,
            observables: vec!["pressure".into(), "flow".into(), "temperature".into()],
            late_commissioning: None,
        }
    }
}

impl FleetConfig {
    /// The default fleet with `k` attributes named from [`ATTRIBUTE_NAMES`]
    /// (then `attr<i>`), each changing every ten minutes on average.
    pub fn with_attribute_count(k: usize) -> Self {
        let attributes = (0..k)
            .map(|i| {
                let name = ATTRIBUTE_NAMES
                    .get(i)
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| format!("attr{i}"));
                AttributeSpec::new(
                    &name,
                    1_000,
                    UpdateInterval::Exponential { mean_ms: 600_000.0 },
                )
            })
            .collect();
        Self {
            attributes,
            ..Self::default()
        }
    }

    pub fn attribute_names(&self) -> Vec<String> {
        self.attributes.iter().map(|a| a.name.clone()).collect()
    }

    /// Measurements per device before loss.
    pub fn samples_per_device(&self) -> u64 {
        (self.duration_s * self.rate_hz).floor() as u64
    }

    pub fn validate(&self) -> Result<(), FleetError> {
        let bad = |what: &str| Err(FleetError(what.to_owned()));
        if !(self.rate_hz.is_finite() && self.rate_hz > 0.0) {
            return bad("rate_hz must be positive");
        }
        if self.rate_hz > 1000.0 {
            return bad("rate_hz above 1000 does not fit a millisecond grid");
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return bad("duration_s must be positive");
        }
        if !(0.0..1.0).contains(&self.loss) {
            return bad("loss must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return bad("jitter must be in [0, 1)");
        }
        if !self.delay.mu.is_finite() || !(self.delay.sigma.is_finite() && self.delay.sigma >= 0.0) {
            return bad("delay needs finite mu and non-negative sigma");
        }
        if self.observables.is_empty() {
            return bad("at least one observable is required");
        }
        if let Some(l) = &self.late_commissioning {
            if !(0.0..=1.0).contains(&l.fraction) {
                return bad("late_commissioning.fraction must be in [0, 1]");
            }
        }
        for (i, a) in self.attributes.iter().enumerate() {
            if a.name.is_empty() || self.attributes[..i].iter().any(|b| b.name == a.name) {
                return bad("attribute names must be non-empty and distinct");
            }
            if a.cardinality == 0 {
                return bad("attribute cardinality must be positive");
            }
            match a.interval {
                UpdateInterval::Fixed { ms: 0 } => return bad("fixed update interval must be positive"),
                UpdateInterval::Exponential { mean_ms } if !(mean_ms.is_finite() && mean_ms > 0.0) => {
                    return bad("exponential update mean must be positive")
                }
                _ => {}
            }
        }
        let end = self.start_ms as f64 + self.duration_s * 1000.0;
        if end >= u64::MAX as f64 / 2.0 {
            return bad("start_ms + duration overflows");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid fleet config: {0}")]
pub struct FleetError(pub String);

/// Counts from one generation run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GenerationStats {
    /// Measurements produced before loss.
    pub generated: u64,
    pub dropped: u64,
    pub updates: u64,
}

pub fn device_name(index: u32) -> String {
    format!("dev-{index:06}")
}

/// Generates the trace of `config`.
pub fn generate_trace(config: &FleetConfig) -> Result<Trace, FleetError> {
    generate(config).map(|(t, _)| t)
}

/// Generates the trace of `config` together with loss accounting.
pub fn generate(config: &FleetConfig) -> Result<(Trace, GenerationStats), FleetError> {
    config.validate()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(config.seed);
    let delay = LogNormal::new(config.delay.mu, config.delay.sigma)
        .map_err(|e| FleetError(format!("delay model: {e}")))?;
    let period = 1000.0 / config.rate_hz;
    let start = config.start_ms;
    let end = start + (config.duration_s * 1000.0).round() as Millis;
    let samples = config.samples_per_device();
    let mut stats = GenerationStats::default();
    // (arrival, 0 for updates / 1 for measurements, generation index, event)
    let mut events: Vec<(Millis, u8, u64, Envelope)> = Vec::new();
    let mut index = 0u64;
    let mut push = |events: &mut Vec<_>, arrival, kind, env| {
        events.push((arrival, kind, index, env));
        index += 1;
    };

    for d in 0..config.devices {
        let device = DeviceId::new(device_name(d)).expect("generated ids are valid");
        for spec in &config.attributes {
            let key = AttributeKey::new(device.clone(), spec.name.clone())
                .map_err(|e| FleetError(e.to_string()))?;
            let late = match &config.late_commissioning {
                Some(l) if rng.random::<f64>() < l.fraction => l.lag_ms,
                _ => 0,
            };
            let mut valid_from = start;
            let mut last_arrival = 0;
            loop {
                let n = rng.random_range(0..spec.cardinality);
                let version = AttributeVersion::new(valid_from, format!("{}{n}", spec.prefix))
                    .map_err(|e| FleetError(e.to_string()))?;
                let arrival = (valid_from + late).max(last_arrival);
                last_arrival = arrival;
                let record = AttributeUpdate {
                    key: key.clone(),
                    version,
                };
                push(&mut events, arrival, 0, Envelope::Update { arrival, record });
                stats.updates += 1;
                let gap = match spec.interval {
                    UpdateInterval::Never => break,
                    UpdateInterval::Fixed { ms } => ms,
                    UpdateInterval::Exponential { mean_ms } => {
                        let e = Exp::new(1.0 / mean_ms).expect("validated mean");
                        (e.sample(&mut rng).round() as Millis).max(1)
                    }
                };
                valid_from += gap;
                if valid_from >= end {
                    break;
                }
            }
        }
        let phase = rng.random::<f64>() * period;
        for seq in 0..samples {
            let offset = phase + seq as f64 * period + rng.random::<f64>() * config.jitter * period;
            let event_time = start + offset.floor() as Millis;
            let observable = &config.observables[rng.random_range(0..config.observables.len())];
            let value = (rng.random::<f64>() * 100_000.0).round() / 1000.0;
            let delay_ms = delay.sample(&mut rng).round() as Millis;
            let lost = rng.random::<f64>() < config.loss;
            stats.generated += 1;
            if lost {
                stats.dropped += 1;
                continue;
            }
            let arrival = event_time.saturating_add(delay_ms);
            let record = Measurement {
                device: device.clone(),
                seq,
                event_time,
                observable: observable.clone(),
                value,
                ingest_time: 0,
            };
            push(&mut events, arrival, 1, Envelope::Measurement { arrival, record });
        }
    }
    events.sort_unstable_by_key(|(arrival, kind, index, _)| (*arrival, *kind, *index));
    let trace = Trace::new(events.into_iter().map(|(_, _, _, e)| e).collect());
    Ok((trace, stats))
}
