//! Domain records shared by the log, the attribute store, the engine and the
//! workload generator.
//!
//! All timestamps are integer milliseconds since the Unix epoch.

use std::borrow::Borrow;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Milliseconds since the Unix epoch.
pub type Millis = u64;

pub const MAX_DEVICE_ID_BYTES: usize = 64;
pub const MAX_ATTRIBUTE_VALUE_BYTES: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("device id must not be empty")]
    EmptyDeviceId,
    #[error("device id is {0} bytes, limit is {MAX_DEVICE_ID_BYTES}")]
    DeviceIdTooLong(usize),
    #[error("attribute name must not be empty")]
    EmptyAttributeName,
    #[error("attribute value is {0} bytes, limit is {MAX_ATTRIBUTE_VALUE_BYTES}")]
    AttributeValueTooLong(usize),
}

/// Opaque sensor device identifier. Cheap to clone.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DeviceId(Arc<str>);

impl DeviceId {
    pub fn new(id: impl AsRef<str>) -> Result<Self, ModelError> {
        let id = id.as_ref();
        if id.is_empty() {
            return Err(ModelError::EmptyDeviceId);
        }
        if id.len() > MAX_DEVICE_ID_BYTES {
            return Err(ModelError::DeviceIdTooLong(id.len()));
        }
        Ok(Self(Arc::from(id)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn as_bytes(&self) -> &[u8] {
        self.0.as_bytes()
    }
}

impl fmt::Debug for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", &*self.0)
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Borrow<str> for DeviceId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl AsRef<str> for DeviceId {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// One sensor reading.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub device: DeviceId,
    /// Per-device counter, strictly increasing in generation order.
    pub seq: u64,
    /// When the reading was taken.
    pub event_time: Millis,
    pub observable: String,
    pub value: f64,
    /// When the reading was appended to the log.
    pub ingest_time: Millis,
}

/// The unit of attribute versioning and caching.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttributeKey {
    pub device: DeviceId,
    pub attribute: String,
}

impl AttributeKey {
    pub fn new(device: DeviceId, attribute: impl Into<String>) -> Result<Self, ModelError> {
        let attribute = attribute.into();
        if attribute.is_empty() {
            return Err(ModelError::EmptyAttributeName);
        }
        Ok(Self { device, attribute })
    }
}

impl fmt::Display for AttributeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.device, self.attribute)
    }
}

/// An attribute value together with the time from which it is valid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AttributeVersion {
    pub valid_from: Millis,
    pub value: String,
}

impl AttributeVersion {
    pub fn new(valid_from: Millis, value: impl Into<String>) -> Result<Self, ModelError> {
        let value = value.into();
        if value.len() > MAX_ATTRIBUTE_VALUE_BYTES {
            return Err(ModelError::AttributeValueTooLong(value.len()));
        }
        Ok(Self { valid_from, value })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AttributeUpdate {
    pub key: AttributeKey,
    pub version: AttributeVersion,
}

/// Where an enriched attribute value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Provenance {
    /// The newest locally cached version.
    Current = 0,
    /// The second newest locally cached version.
    Previous = 1,
    /// Looked up in the versioned store.
    Historical = 2,
    /// No version was valid at the event time.
    Missing = 3,
}

impl Provenance {
    pub const ALL: [Provenance; 4] = [
        Provenance::Current,
        Provenance::Previous,
        Provenance::Historical,
        Provenance::Missing,
    ];

    pub fn from_u8(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Self::Current),
            1 => Some(Self::Previous),
            2 => Some(Self::Historical),
            3 => Some(Self::Missing),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Current => "current",
            Self::Previous => "previous",
            Self::Historical => "historical",
            Self::Missing => "missing",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One enrichment attribute attached to a measurement. `value` is empty when
/// the provenance is [`Provenance::Missing`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EnrichedAttribute {
    pub name: String,
    pub value: String,
    pub provenance: Provenance,
}

/// A measurement joined with the attribute values valid at its event time.
/// Attributes appear in configured order, one entry per configured name.
#[derive(Debug, Clone, PartialEq)]
pub struct EnrichedMeasurement {
    pub measurement: Measurement,
    pub attributes: Vec<EnrichedAttribute>,
    pub enrich_time: Millis,
    /// `enrich_time - ingest_time`, saturating at zero.
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StreamOffset {
    pub topic: String,
    pub partition: u32,
    pub offset: u64,
}

impl StreamOffset {
    pub fn new(topic: impl Into<String>, partition: u32, offset: u64) -> Self {
        Self {
            topic: topic.into(),
            partition,
            offset,
        }
    }
}

/// Wall clock in milliseconds.
pub fn now_millis() -> Millis {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as Millis)
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn device_id_limits() {
        assert_eq!(DeviceId::new(""), Err(ModelError::EmptyDeviceId));
        assert!(DeviceId::new("a".repeat(64)).is_ok());
        assert_eq!(
            DeviceId::new("a".repeat(65)),
            Err(ModelError::DeviceIdTooLong(65))
        );
    }

    #[test]
    fn attribute_limits() {
        let dev = DeviceId::new("d").unwrap();
        assert_eq!(
            AttributeKey::new(dev, ""),
            Err(ModelError::EmptyAttributeName)
        );
        assert!(AttributeVersion::new(1, "v".repeat(256)).is_ok());
        assert!(AttributeVersion::new(1, "v".repeat(257)).is_err());
    }

    #[test]
    fn attribute_keys_order_by_device_then_name() {
        let a = AttributeKey::new(DeviceId::new("a").unwrap(), "z").unwrap();
        let b = AttributeKey::new(DeviceId::new("b").unwrap(), "a").unwrap();
        assert!(a < b);
    }
}
