//! Length-prefixed little-endian binary encoding.
//!
//! Every record is framed as a `u32` payload length followed by its fields in
//! declaration order. Strings are a `u16` byte length plus UTF-8, integers are
//! fixed-width little-endian, floats are IEEE-754 little-endian. Nested
//! records are written inline without their own length prefix.

use thiserror::Error;

use crate::model::{
    AttributeKey, AttributeUpdate, AttributeVersion, DeviceId, EnrichedAttribute,
    EnrichedMeasurement, Measurement, Millis, ModelError, Provenance, StreamOffset,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("input truncated: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("frame declares {declared} bytes but fields used {used}")]
    LengthMismatch { declared: usize, used: usize },
    #[error("{0} trailing bytes after record")]
    TrailingBytes(usize),
    #[error("string is not valid UTF-8")]
    InvalidUtf8,
    #[error("string of {0} bytes does not fit a u16 length")]
    StringTooLong(usize),
    #[error("unknown tag {0}")]
    UnknownTag(u8),
    #[error("invalid record: {0}")]
    Invalid(#[from] ModelError),
    #[error("checksum mismatch")]
    Checksum,
}

pub struct WireReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> WireReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.remaining() < n {
            return Err(WireError::Truncated {
                needed: n,
                available: self.remaining(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn str(&mut self) -> Result<&'a str, WireError> {
        let len = self.u16()? as usize;
        std::str::from_utf8(self.take(len)?).map_err(|_| WireError::InvalidUtf8)
    }

    pub fn string(&mut self) -> Result<String, WireError> {
        self.str().map(str::to_owned)
    }
}

pub fn put_u8(out: &mut Vec<u8>, v: u8) {
    out.push(v);
}

pub fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn put_f64(out: &mut Vec<u8>, v: f64) {
    put_u64(out, v.to_bits());
}

/// Strings longer than `u16::MAX` bytes cannot be framed. Domain types cap
/// their strings well below that, so callers of the typed encoders never hit
/// the panic.
pub fn put_str(out: &mut Vec<u8>, s: &str) {
    let len = u16::try_from(s.len()).expect("string exceeds u16 framing limit");
    put_u16(out, len);
    out.extend_from_slice(s.as_bytes());
}

/// A record with a fixed binary layout.
pub trait Wire: Sized {
    fn write_fields(&self, out: &mut Vec<u8>);

    fn read_fields(r: &mut WireReader<'_>) -> Result<Self, WireError>;

    /// Appends the framed record to `out`.
    fn encode_into(&self, out: &mut Vec<u8>) {
        let start = out.len();
        put_u32(out, 0);
        self.write_fields(out);
        let len = (out.len() - start - 4) as u32;
        out[start..start + 4].copy_from_slice(&len.to_le_bytes());
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    /// Reads one framed record from the reader.
    fn read_framed(r: &mut WireReader<'_>) -> Result<Self, WireError> {
        let declared = r.u32()? as usize;
        let body = r.take(declared)?;
        let mut inner = WireReader::new(body);
        let value = Self::read_fields(&mut inner)?;
        if inner.remaining() != 0 {
            return Err(WireError::LengthMismatch {
                declared,
                used: inner.position(),
            });
        }
        Ok(value)
    }

    /// Decodes exactly one framed record occupying all of `bytes`.
    fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = WireReader::new(bytes);
        let value = Self::read_framed(&mut r)?;
        if r.remaining() != 0 {
            return Err(WireError::TrailingBytes(r.remaining()));
        }
        Ok(value)
    }
}

fn read_device(r: &mut WireReader<'_>) -> Result<DeviceId, WireError> {
    Ok(DeviceId::new(r.str()?)?)
}

impl Wire for Measurement {
    fn write_fields(&self, out: &mut Vec<u8>) {
        put_str(out, self.device.as_str());
        put_u64(out, self.seq);
        put_u64(out, self.event_time);
        put_str(out, &self.observable);
        put_f64(out, self.value);
        put_u64(out, self.ingest_time);
    }

    fn read_fields(r: &mut WireReader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            device: read_device(r)?,
            seq: r.u64()?,
            event_time: r.u64()?,
            observable: r.string()?,
            value: r.f64()?,
            ingest_time: r.u64()?,
        })
    }
}

impl Wire for AttributeKey {
    fn write_fields(&self, out: &mut Vec<u8>) {
        put_str(out, self.device.as_str());
        put_str(out, &self.attribute);
    }

    fn read_fields(r: &mut WireReader<'_>) -> Result<Self, WireError> {
        let device = read_device(r)?;
        Ok(AttributeKey::new(device, r.string()?)?)
    }
}

impl Wire for AttributeVersion {
    fn write_fields(&self, out: &mut Vec<u8>) {
        put_u64(out, self.valid_from);
        put_str(out, &self.value);
    }

    fn read_fields(r: &mut WireReader<'_>) -> Result<Self, WireError> {
        let valid_from = r.u64()?;
        Ok(AttributeVersion::new(valid_from, r.string()?)?)
    }
}

impl Wire for AttributeUpdate {
    fn write_fields(&self, out: &mut Vec<u8>) {
        self.key.write_fields(out);
        self.version.write_fields(out);
    }

    fn read_fields(r: &mut WireReader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            key: AttributeKey::read_fields(r)?,
            version: AttributeVersion::read_fields(r)?,
        })
    }
}

impl Wire for EnrichedMeasurement {
    fn write_fields(&self, out: &mut Vec<u8>) {
        self.measurement.write_fields(out);
        let count = u16::try_from(self.attributes.len()).expect("too many attributes");
        put_u16(out, count);
        for attr in &self.attributes {
            put_str(out, &attr.name);
            put_str(out, &attr.value);
            put_u8(out, attr.provenance as u8);
        }
        put_u64(out, self.enrich_time);
        put_u64(out, self.latency_ms);
    }

    fn read_fields(r: &mut WireReader<'_>) -> Result<Self, WireError> {
        let measurement = Measurement::read_fields(r)?;
        let count = r.u16()? as usize;
        let mut attributes = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let value = r.string()?;
            let tag = r.u8()?;
            let provenance = Provenance::from_u8(tag).ok_or(WireError::UnknownTag(tag))?;
            attributes.push(EnrichedAttribute {
                name,
                value,
                provenance,
            });
        }
        Ok(Self {
            measurement,
            attributes,
            enrich_time: r.u64()?,
            latency_ms: r.u64()?,
        })
    }
}

impl Wire for StreamOffset {
    fn write_fields(&self, out: &mut Vec<u8>) {
        put_str(out, &self.topic);
        put_u32(out, self.partition);
        put_u64(out, self.offset);
    }

    fn read_fields(r: &mut WireReader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            topic: r.string()?,
            partition: r.u32()?,
            offset: r.u64()?,
        })
    }
}

pub const TAG_MEASUREMENT: u8 = 1;
pub const TAG_UPDATE: u8 = 2;

/// An input record as it travels through the trace file and the input
/// topics: `u8` type tag, `u64` arrival timestamp, framed record.
#[derive(Debug, Clone, PartialEq)]
pub enum Envelope {
    Measurement { arrival: Millis, record: Measurement },
    Update { arrival: Millis, record: AttributeUpdate },
}

impl Envelope {
    pub fn arrival(&self) -> Millis {
        match self {
            Envelope::Measurement { arrival, .. } | Envelope::Update { arrival, .. } => *arrival,
        }
    }

    pub fn device(&self) -> &DeviceId {
        match self {
            Envelope::Measurement { record, .. } => &record.device,
            Envelope::Update { record, .. } => &record.key.device,
        }
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            Envelope::Measurement { arrival, record } => {
                put_u8(out, TAG_MEASUREMENT);
                put_u64(out, *arrival);
                record.encode_into(out);
            }
            Envelope::Update { arrival, record } => {
                put_u8(out, TAG_UPDATE);
                put_u64(out, *arrival);
                record.encode_into(out);
            }
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    pub fn read(r: &mut WireReader<'_>) -> Result<Self, WireError> {
        let tag = r.u8()?;
        let arrival = r.u64()?;
        match tag {
            TAG_MEASUREMENT => Ok(Envelope::Measurement {
                arrival,
                record: Measurement::read_framed(r)?,
            }),
            TAG_UPDATE => Ok(Envelope::Update {
                arrival,
                record: AttributeUpdate::read_framed(r)?,
            }),
            other => Err(WireError::UnknownTag(other)),
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = WireReader::new(bytes);
        let env = Self::read(&mut r)?;
        if r.remaining() != 0 {
            return Err(WireError::TrailingBytes(r.remaining()));
        }
        Ok(env)
    }
}
