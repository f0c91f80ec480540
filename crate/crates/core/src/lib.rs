//! Partitioned point-in-time enrichment of water-grid sensor streams.
//!
//! Sensor measurements and attribute updates flow through a durable,
//! partitioned [`log`]. One [`engine`] worker per partition joins every
//! measurement with the attribute versions valid at its event time, keeping
//! the two newest versions of each attribute in local memory and falling back
//! to the versioned [`store`] for older readings. Workers checkpoint their
//! input offsets and recover by replay; the output sink deduplicates on
//! `(device, seq)` so results are exactly-once.
//!
//! The [`generator`] module produces seeded telemetry traces with delay,
//! loss and reordering.

pub mod config;
pub mod engine;
pub mod generator;
pub mod log;
pub mod model;
pub mod partition;
pub mod store;
pub mod wire;

pub use model::{
    AttributeKey, AttributeUpdate, AttributeVersion, DeviceId, EnrichedAttribute,
    EnrichedMeasurement, Measurement, Millis, Provenance, StreamOffset,
};
pub use partition::partition_for;
