//! One partition on disk: `segment.dat` holds framed records, `segment.idx`
//! holds the `u64` byte position of every record so reads seek in O(1).
//!
//! Frame layout: `u32` body length, `u32` CRC32C of the body, body.
//! Body layout: `u64` append time, `u16` key length, key, payload.

use std::fs::{File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use super::{LogError, LogRecord};
use crate::model::{now_millis, Millis};

pub(crate) const SEGMENT_FILE: &str = "segment.dat";
pub(crate) const INDEX_FILE: &str = "segment.idx";

const FRAME_HEADER: usize = 8;
const BODY_HEADER: usize = 10;

/// fsync after this many unsynced records.
pub const GROUP_SYNC_RECORDS: usize = 1_000;
/// fsync when the oldest unsynced record is this old.
pub const GROUP_SYNC_INTERVAL: Duration = Duration::from_millis(10);

struct Inner {
    segment: File,
    index: File,
    positions: Vec<u64>,
    end_pos: u64,
    last_append_time: Millis,
    unsynced: usize,
    last_sync: Instant,
}

pub(crate) struct PartitionLog {
    dir: PathBuf,
    sync: bool,
    inner: Mutex<Inner>,
    reader: File,
}

fn frame_into(out: &mut Vec<u8>, append_time: Millis, key: &[u8], payload: &[u8]) {
    let key_len = u16::try_from(key.len()).expect("log key longer than u16::MAX");
    let body_len = BODY_HEADER + key.len() + payload.len();
    let start = out.len();
    out.reserve(FRAME_HEADER + body_len);
    out.extend_from_slice(&(body_len as u32).to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    out.extend_from_slice(&append_time.to_le_bytes());
    out.extend_from_slice(&key_len.to_le_bytes());
    out.extend_from_slice(key);
    out.extend_from_slice(payload);
    let crc = crc32c::crc32c(&out[start + FRAME_HEADER..]);
    out[start + 4..start + 8].copy_from_slice(&crc.to_le_bytes());
}

/// Parses one frame at the start of `buf`. Returns `None` for a torn or
/// corrupt frame.
fn parse_frame(buf: &[u8]) -> Option<(usize, Millis, &[u8], &[u8])> {
    if buf.len() < FRAME_HEADER {
        return None;
    }
    let body_len = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
    let crc = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if body_len < BODY_HEADER || buf.len() < FRAME_HEADER + body_len {
        return None;
    }
    let body = &buf[FRAME_HEADER..FRAME_HEADER + body_len];
    if crc32c::crc32c(body) != crc {
        return None;
    }
    let append_time = u64::from_le_bytes(body[0..8].try_into().unwrap());
    let key_len = u16::from_le_bytes(body[8..10].try_into().unwrap()) as usize;
    if BODY_HEADER + key_len > body_len {
        return None;
    }
    let key = &body[BODY_HEADER..BODY_HEADER + key_len];
    let payload = &body[BODY_HEADER + key_len..];
    Some((FRAME_HEADER + body_len, append_time, key, payload))
}

impl PartitionLog {
    pub(crate) fn create(dir: &Path, sync: bool) -> Result<Self, LogError> {
        std::fs::create_dir_all(dir)?;
        for name in [SEGMENT_FILE, INDEX_FILE] {
            OpenOptions::new()
                .write(true)
                .create_new(true)
                .open(dir.join(name))?;
        }
        Self::open(dir, sync)
    }

    /// Opens an existing partition, dropping any torn tail left by a crash.
    pub(crate) fn open(dir: &Path, sync: bool) -> Result<Self, LogError> {
        let seg_path = dir.join(SEGMENT_FILE);
        let idx_path = dir.join(INDEX_FILE);
        let segment = OpenOptions::new().read(true).write(true).open(&seg_path)?;
        let index = OpenOptions::new().read(true).write(true).open(&idx_path)?;
        let reader = File::open(&seg_path)?;

        let seg_len = segment.metadata()?.len();
        let idx_bytes = std::fs::read(&idx_path)?;
        let mut positions: Vec<u64> = idx_bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let data = std::fs::read(&seg_path)?;
        let indexed_ok = positions.windows(2).all(|w| w[0] < w[1])
            && positions.first().is_none_or(|&p| p == 0)
            && positions.last().is_none_or(|&p| p < seg_len);
        if !indexed_ok {
            log::warn!("rebuilding index for {}", dir.display());
            positions.clear();
        }
        // Resume at the last indexed record, re-validating it. If it is
        // corrupt the index cannot be trusted and everything is rescanned.
        let resume = positions.pop();
        let trusted = positions.len();
        let (mut pos, mut last_append_time) = scan(&data, resume.unwrap_or(0), &mut positions);
        if resume.is_some() && positions.len() == trusted {
            positions.clear();
            (pos, last_append_time) = scan(&data, 0, &mut positions);
        }
        let end_pos = pos as u64;
        if end_pos < seg_len {
            log::warn!(
                "truncating {} torn bytes in {}",
                seg_len - end_pos,
                seg_path.display()
            );
            segment.set_len(end_pos)?;
        }
        if positions.len() * 8 != idx_bytes.len()
            || idx_bytes
                .chunks_exact(8)
                .zip(&positions)
                .any(|(c, p)| u64::from_le_bytes(c.try_into().unwrap()) != *p)
        {
            let rebuilt: Vec<u8> = positions.iter().flat_map(|p| p.to_le_bytes()).collect();
            index.set_len(0)?;
            index.write_all_at(&rebuilt, 0)?;
        }
        segment.sync_all()?;
        index.sync_all()?;

        Ok(Self {
            dir: dir.to_path_buf(),
            sync,
            reader,
            inner: Mutex::new(Inner {
                segment,
                index,
                positions,
                end_pos,
                last_append_time,
                unsynced: 0,
                last_sync: Instant::now(),
            }),
        })
    }

    /// Appends records in order and returns the offset of the first one.
    pub(crate) fn append_batch<'a, I>(&self, records: I) -> Result<u64, LogError>
    where
        I: IntoIterator<Item = (&'a [u8], &'a [u8])>,
    {
        let mut inner = self.inner.lock();
        let first = inner.positions.len() as u64;
        let append_time = now_millis().max(inner.last_append_time);
        let mut frames = Vec::new();
        let mut starts = Vec::new();
        for (key, payload) in records {
            starts.push(inner.end_pos + frames.len() as u64);
            frame_into(&mut frames, append_time, key, payload);
        }
        if starts.is_empty() {
            return Ok(first);
        }
        let idx: Vec<u8> = starts.iter().flat_map(|p| p.to_le_bytes()).collect();
        let seg_at = inner.end_pos;
        let idx_at = first * 8;
        let written = inner
            .segment
            .write_all_at(&frames, seg_at)
            .and_then(|_| inner.index.write_all_at(&idx, idx_at));
        if let Err(e) = written {
            // Roll back so the in-memory view never runs ahead of the files.
            let _ = inner.segment.set_len(seg_at);
            let _ = inner.index.set_len(idx_at);
            return Err(e.into());
        }
        inner.end_pos += frames.len() as u64;
        inner.positions.extend_from_slice(&starts);
        inner.last_append_time = append_time;
        inner.unsynced += starts.len();
        if self.sync
            && (inner.unsynced >= GROUP_SYNC_RECORDS
                || inner.last_sync.elapsed() >= GROUP_SYNC_INTERVAL)
        {
            inner.segment.sync_data()?;
            inner.index.sync_data()?;
            inner.unsynced = 0;
            inner.last_sync = Instant::now();
        }
        Ok(first)
    }

    pub(crate) fn read(&self, from: u64, max: usize) -> Result<Vec<LogRecord>, LogError> {
        let (positions, end) = {
            let inner = self.inner.lock();
            let len = inner.positions.len() as u64;
            if from >= len || max == 0 {
                return Ok(Vec::new());
            }
            let to = len.min(from.saturating_add(max as u64));
            let end = if to < len {
                inner.positions[to as usize]
            } else {
                inner.end_pos
            };
            (inner.positions[from as usize..to as usize].to_vec(), end)
        };
        let start = positions[0];
        let mut buf = vec![0u8; (end - start) as usize];
        self.reader.read_exact_at(&mut buf, start)?;
        let mut out = Vec::with_capacity(positions.len());
        for (i, &p) in positions.iter().enumerate() {
            let at = (p - start) as usize;
            let (_, append_time, key, payload) =
                parse_frame(&buf[at..]).ok_or_else(|| LogError::Corrupt {
                    path: self.dir.join(SEGMENT_FILE),
                    offset: from + i as u64,
                })?;
            out.push(LogRecord {
                offset: from + i as u64,
                key: key.to_vec(),
                payload: payload.to_vec(),
                append_time,
            });
        }
        Ok(out)
    }

    pub(crate) fn end_offset(&self) -> u64 {
        self.inner.lock().positions.len() as u64
    }

    pub(crate) fn sync(&self) -> Result<(), LogError> {
        let mut inner = self.inner.lock();
        inner.segment.sync_data()?;
        inner.index.sync_data()?;
        inner.unsynced = 0;
        inner.last_sync = Instant::now();
        Ok(())
    }
}

/// Appends the position of every intact frame from `from` onward. Returns the
/// end of the last intact frame and its append time.
fn scan(data: &[u8], from: u64, positions: &mut Vec<u64>) -> (usize, Millis) {
    let mut pos = from as usize;
    let mut last_time = 0;
    while let Some((len, t, _, _)) = data.get(pos..).and_then(parse_frame) {
        positions.push(pos as u64);
        last_time = t;
        pos += len;
    }
    (pos, last_time)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trip_and_corruption() {
        let mut buf = Vec::new();
        frame_into(&mut buf, 42, b"key", b"payload");
        let (len, t, k, p) = parse_frame(&buf).unwrap();
        assert_eq!((len, t, k, p), (buf.len(), 42, &b"key"[..], &b"payload"[..]));
        let mut bad = buf.clone();
        *bad.last_mut().unwrap() ^= 1;
        assert!(parse_frame(&bad).is_none());
        assert!(parse_frame(&buf[..buf.len() - 1]).is_none());
    }

    #[test]
    fn torn_tail_is_truncated_on_open() {
        let dir = tempfile::tempdir().unwrap();
        let p = PartitionLog::create(dir.path(), true).unwrap();
        p.append_batch([(&b"k"[..], &b"one"[..]), (&b"k"[..], &b"two"[..])])
            .unwrap();
        drop(p);
        // Simulate a torn write: half a frame at the end of the segment.
        let seg = dir.path().join(SEGMENT_FILE);
        let mut frame = Vec::new();
        frame_into(&mut frame, 1, b"k", b"three");
        let f = OpenOptions::new().append(true).open(&seg).unwrap();
        let len = f.metadata().unwrap().len();
        f.write_all_at(&frame[..frame.len() / 2], len).unwrap();
        drop(f);

        let p = PartitionLog::open(dir.path(), true).unwrap();
        assert_eq!(p.end_offset(), 2);
        assert_eq!(std::fs::metadata(&seg).unwrap().len(), len);
        let off = p.append_batch([(&b"k"[..], &b"three"[..])]).unwrap();
        assert_eq!(off, 2);
        let recs = p.read(0, 10).unwrap();
        let payloads: Vec<_> = recs.iter().map(|r| r.payload.as_slice()).collect();
        assert_eq!(payloads, [&b"one"[..], b"two", b"three"]);
    }

    #[test]
    fn lost_index_entries_are_rebuilt() {
        let dir = tempfile::tempdir().unwrap();
        let p = PartitionLog::create(dir.path(), false).unwrap();
        for i in 0..5u8 {
            p.append_batch([(&b"k"[..], &[i][..])]).unwrap();
        }
        drop(p);
        // Crash between segment write and index write: index lags behind.
        let idx = dir.path().join(INDEX_FILE);
        let f = OpenOptions::new().write(true).open(&idx).unwrap();
        f.set_len(16).unwrap();
        drop(f);
        let p = PartitionLog::open(dir.path(), false).unwrap();
        assert_eq!(p.end_offset(), 5);
        assert_eq!(std::fs::metadata(&idx).unwrap().len(), 40);
        assert_eq!(p.read(4, 1).unwrap()[0].payload, vec![4]);
    }

    #[test]
    fn garbage_index_falls_back_to_full_scan() {
        let dir = tempfile::tempdir().unwrap();
        let p = PartitionLog::create(dir.path(), false).unwrap();
        for i in 0..3u8 {
            p.append_batch([(&b"k"[..], &[i][..])]).unwrap();
        }
        drop(p);
        std::fs::write(dir.path().join(INDEX_FILE), [0xffu8; 24]).unwrap();
        let p = PartitionLog::open(dir.path(), false).unwrap();
        assert_eq!(p.end_offset(), 3);
        assert_eq!(p.read(0, 3).unwrap().len(), 3);
    }
}
