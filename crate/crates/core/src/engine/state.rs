//! Worker-local attribute cache and the per-record enrichment procedure.

use std::collections::HashMap;

use crate::model::{
    AttributeKey, AttributeUpdate, AttributeVersion, DeviceId, EnrichedAttribute,
    EnrichedMeasurement, Measurement, Millis, Provenance,
};
use crate::store::{PutOutcome, RemoteStore, StoreError};

use super::config::MissingPolicy;

/// The two newest versions of one attribute known to a worker.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CachedVersions {
    pub current: Option<AttributeVersion>,
    pub previous: Option<AttributeVersion>,
}

impl CachedVersions {
    pub fn from_latest_two(
        (current, previous): (Option<AttributeVersion>, Option<AttributeVersion>),
    ) -> Self {
        Self { current, previous }
    }
}

/// Per-key current/previous cache owned by one partition worker.
///
/// Entries are grouped by device so enriching a measurement with several
/// attributes costs a single hash lookup.
#[derive(Debug, Clone, Default)]
pub struct LocalAttributeState {
    devices: HashMap<DeviceId, Vec<(String, CachedVersions)>>,
}

impl LocalAttributeState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &AttributeKey) -> Option<&CachedVersions> {
        self.lookup(&key.device, &key.attribute)
    }

    fn lookup(&self, device: &DeviceId, attribute: &str) -> Option<&CachedVersions> {
        self.devices
            .get(device)?
            .iter()
            .find(|(name, _)| name == attribute)
            .map(|(_, slot)| slot)
    }

    fn slot_mut(&mut self, key: &AttributeKey) -> &mut CachedVersions {
        let attrs = self.devices.entry(key.device.clone()).or_default();
        let idx = match attrs.iter().position(|(name, _)| *name == key.attribute) {
            Some(i) => i,
            None => {
                attrs.push((key.attribute.clone(), CachedVersions::default()));
                attrs.len() - 1
            }
        };
        &mut attrs[idx].1
    }

    /// Replaces the cached versions of `key`.
    pub fn insert(&mut self, key: &AttributeKey, versions: CachedVersions) {
        *self.slot_mut(key) = versions;
    }

    pub fn len(&self) -> usize {
        self.devices.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All cached keys with their versions, sorted by key.
    pub fn entries(&self) -> Vec<(AttributeKey, CachedVersions)> {
        let mut out: Vec<_> = self
            .devices
            .iter()
            .flat_map(|(dev, attrs)| {
                attrs.iter().map(|(name, slot)| {
                    (
                        AttributeKey {
                            device: dev.clone(),
                            attribute: name.clone(),
                        },
                        slot.clone(),
                    )
                })
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

/// What [`apply_update`] did to the cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheChange {
    /// The update became the current version.
    Advanced,
    /// The update was older than the current version; the cache was reloaded
    /// from the store.
    Rebuilt,
    /// The update was already the current version.
    Unchanged,
}

/// Persists `update` to the store, then folds it into the cache.
///
/// On a store error the cache is left untouched.
pub fn apply_update(
    state: &mut LocalAttributeState,
    update: &AttributeUpdate,
    store: &RemoteStore,
) -> Result<CacheChange, StoreError> {
    let put = store.put_version(&update.key, &update.version)?;
    let slot = state.slot_mut(&update.key);
    let newer = slot
        .current
        .as_ref()
        .is_none_or(|c| update.version.valid_from > c.valid_from);
    if newer {
        slot.previous = slot.current.replace(update.version.clone());
        return Ok(CacheChange::Advanced);
    }
    let is_current = slot
        .current
        .as_ref()
        .is_some_and(|c| c.valid_from == update.version.valid_from);
    if is_current {
        debug_assert_eq!(put, PutOutcome::Unchanged);
        return Ok(CacheChange::Unchanged);
    }
    let latest = store.get_latest_two(&update.key)?;
    state.insert(&update.key, CachedVersions::from_latest_two(latest));
    Ok(CacheChange::Rebuilt)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Enrichment {
    Enriched(EnrichedMeasurement),
    /// At least one attribute had no valid version and the policy routes such
    /// records to the dead-letter topic.
    DeadLetter(Measurement),
}

/// Joins `m` with the version of every configured attribute valid at its
/// event time.
///
/// Per attribute: the cached current version if `event_time >= valid_from`,
/// else the cached previous version under the same test, else a point-in-time
/// lookup in the store.
pub fn enrich(
    state: &LocalAttributeState,
    m: Measurement,
    attributes: &[String],
    policy: MissingPolicy,
    store: &RemoteStore,
    enrich_time: Millis,
) -> Result<Enrichment, StoreError> {
    let cached = state.devices.get(&m.device);
    let mut out = Vec::with_capacity(attributes.len());
    let mut missing = false;
    for name in attributes {
        let slot = cached.and_then(|attrs| {
            attrs
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, slot)| slot)
        });
        let hit = slot.and_then(|s| {
            let valid = |v: &&AttributeVersion| m.event_time >= v.valid_from;
            if let Some(cur) = s.current.as_ref().filter(valid) {
                return Some((cur.value.clone(), Provenance::Current));
            }
            s.previous
                .as_ref()
                .filter(valid)
                .map(|prev| (prev.value.clone(), Provenance::Previous))
        });
        let (value, provenance) = match hit {
            Some(found) => found,
            None => {
                let key = AttributeKey {
                    device: m.device.clone(),
                    attribute: name.clone(),
                };
                match store.get_at(&key, m.event_time)? {
                    Some(v) => (v.value, Provenance::Historical),
                    None => {
                        missing = true;
                        (String::new(), Provenance::Missing)
                    }
                }
            }
        };
        out.push(EnrichedAttribute {
            name: name.clone(),
            value,
            provenance,
        });
    }
    if missing && policy == MissingPolicy::DeadLetter {
        return Ok(Enrichment::DeadLetter(m));
    }
    let latency_ms = enrich_time.saturating_sub(m.ingest_time);
    Ok(Enrichment::Enriched(EnrichedMeasurement {
        measurement: m,
        attributes: out,
        enrich_time,
        latency_ms,
    }))
}
