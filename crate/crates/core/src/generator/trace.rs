use std::collections::HashMap;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{AttributeUpdate, DeviceId, Measurement, Millis};
use crate::wire::{Envelope, WireError, WireReader};

/// Input events in injection order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    events: Vec<Envelope>,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed trace at byte {position}: {source}")]
    Malformed { position: usize, source: WireError },
}

impl Trace {
    pub fn new(events: Vec<Envelope>) -> Self {
        Self { events }
    }

    pub fn events(&self) -> &[Envelope] {
        &self.events
    }

    pub fn into_events(self) -> Vec<Envelope> {
        self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn measurements(&self) -> impl Iterator<Item = (Millis, &Measurement)> {
        self.events.iter().filter_map(|e| match e {
            Envelope::Measurement { arrival, record } => Some((*arrival, record)),
            _ => None,
        })
    }

    pub fn updates(&self) -> impl Iterator<Item = (Millis, &AttributeUpdate)> {
        self.events.iter().filter_map(|e| match e {
            Envelope::Update { arrival, record } => Some((*arrival, record)),
            _ => None,
        })
    }

    pub fn measurement_count(&self) -> usize {
        self.measurements().count()
    }

    pub fn update_count(&self) -> usize {
        self.len() - self.measurement_count()
    }

    /// Measurements that arrive after a later reading of the same device.
    pub fn out_of_order_count(&self) -> usize {
        let mut newest: HashMap<&DeviceId, Millis> = HashMap::new();
        let mut count = 0;
        for (_, m) in self.measurements() {
            let seen = newest.entry(&m.device).or_insert(m.event_time);
            if m.event_time < *seen {
                count += 1;
            } else {
                *seen = m.event_time;
            }
        }
        count
    }

    pub fn out_of_order_fraction(&self) -> f64 {
        let n = self.measurement_count();
        if n == 0 {
            0.0
        } else {
            self.out_of_order_count() as f64 / n as f64
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in &self.events {
            e.encode_into(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TraceError> {
        let mut r = WireReader::new(bytes);
        let mut events = Vec::new();
        while r.remaining() > 0 {
            let position = r.position();
            let e = Envelope::read(&mut r)
                .map_err(|source| TraceError::Malformed { position, source })?;
            events.push(e);
        }
        Ok(Self { events })
    }
}

pub fn write_trace(path: &Path, trace: &Trace) -> Result<(), TraceError> {
    let io = |source| TraceError::Io {
        path: path.to_owned(),
        source,
    };
    let mut w = BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let mut buf = Vec::new();
    for e in trace.events() {
        buf.clear();
        e.encode_into(&mut buf);
        w.write_all(&buf).map_err(io)?;
    }
    w.into_inner()
        .map_err(|e| io(e.into_error()))?
        .sync_all()
        .map_err(io)
}

pub fn read_trace(path: &Path) -> Result<Trace, TraceError> {
    let bytes = std::fs::read(path).map_err(|source| TraceError::Io {
        path: path.to_owned(),
        source,
    })?;
    Trace::from_bytes(&bytes)
}
