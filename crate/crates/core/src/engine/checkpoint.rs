//! Durable per-partition checkpoints.
//!
//! Files live at `<dir>/p<partition>/ckpt-<epoch>`: a framed [`Checkpoint`]
//! followed by a `u32` CRC32C of the frame. Each one is written to a
//! temporary file, synced, then renamed into place, so a crash mid-write
//! leaves the previous checkpoint intact. The newest few are retained so a
//! corrupt file can fall back to its predecessor.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::model::{DeviceId, StreamOffset};
use crate::wire::{put_str, put_u32, put_u64, Wire, WireError, WireReader};

/// Checkpoints kept on disk per partition.
pub const RETAINED_CHECKPOINTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    pub partition: u32,
    /// Next measurement offset to consume.
    pub measurement_offset: StreamOffset,
    /// Next attribute update offset to apply.
    pub update_offset: StreamOffset,
    pub epoch: u64,
    /// Highest emitted `seq` per device, sorted by device.
    pub emitted_high_watermark: Vec<(DeviceId, u64)>,
    /// End of this partition's results output when the checkpoint was taken.
    pub results_offset: StreamOffset,
    /// End of this partition's dead-letter output when the checkpoint was taken.
    pub dead_letter_offset: StreamOffset,
}

impl Wire for Checkpoint {
    fn write_fields(&self, out: &mut Vec<u8>) {
        put_u32(out, self.partition);
        self.measurement_offset.write_fields(out);
        self.update_offset.write_fields(out);
        put_u64(out, self.epoch);
        put_u32(out, self.emitted_high_watermark.len() as u32);
        for (dev, seq) in &self.emitted_high_watermark {
            put_str(out, dev.as_str());
            put_u64(out, *seq);
        }
        self.results_offset.write_fields(out);
        self.dead_letter_offset.write_fields(out);
    }

    fn read_fields(r: &mut WireReader<'_>) -> Result<Self, WireError> {
        let partition = r.u32()?;
        let measurement_offset = StreamOffset::read_fields(r)?;
        let update_offset = StreamOffset::read_fields(r)?;
        let epoch = r.u64()?;
        let n = r.u32()? as usize;
        let mut emitted_high_watermark = Vec::with_capacity(n.min(r.remaining() / 10));
        for _ in 0..n {
            let dev = DeviceId::new(r.str()?)?;
            emitted_high_watermark.push((dev, r.u64()?));
        }
        Ok(Self {
            partition,
            measurement_offset,
            update_offset,
            epoch,
            emitted_high_watermark,
            results_offset: StreamOffset::read_fields(r)?,
            dead_letter_offset: StreamOffset::read_fields(r)?,
        })
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.encode();
        let crc = crc32c::crc32c(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        if bytes.len() < 4 {
            return Err(WireError::Truncated {
                needed: 4,
                available: bytes.len(),
            });
        }
        let (frame, crc) = bytes.split_at(bytes.len() - 4);
        if crc32c::crc32c(frame) != u32::from_le_bytes(crc.try_into().unwrap()) {
            return Err(WireError::Checksum);
        }
        Self::decode(frame)
    }
}

/// Checkpoint files of one partition.
#[derive(Debug, Clone)]
pub struct CheckpointDir {
    dir: PathBuf,
}

impl CheckpointDir {
    pub fn new(root: &Path, partition: u32) -> Self {
        Self {
            dir: root.join(format!("p{partition}")),
        }
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    fn file(&self, epoch: u64) -> PathBuf {
        self.dir.join(format!("ckpt-{epoch}"))
    }

    /// Epochs of complete checkpoint files, newest first.
    pub fn epochs(&self) -> std::io::Result<Vec<u64>> {
        let entries = match fs::read_dir(&self.dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e),
        };
        let mut epochs = Vec::new();
        for entry in entries {
            let name = entry?.file_name();
            if let Some(epoch) = name
                .to_str()
                .and_then(|n| n.strip_prefix("ckpt-"))
                .and_then(|n| n.parse::<u64>().ok())
            {
                epochs.push(epoch);
            }
        }
        epochs.sort_unstable_by(|a, b| b.cmp(a));
        Ok(epochs)
    }

    /// Writes `ckpt` atomically. `before_rename` runs after the temporary
    /// file is durable and before it becomes visible; an error from it
    /// abandons the write.
    pub fn write<E>(
        &self,
        ckpt: &Checkpoint,
        before_rename: impl FnOnce() -> Result<(), E>,
    ) -> Result<(), E>
    where
        E: From<std::io::Error>,
    {
        fs::create_dir_all(&self.dir)?;
        let tmp = self.dir.join(format!("ckpt-{}.tmp", ckpt.epoch));
        let mut f = File::create(&tmp)?;
        f.write_all(&ckpt.to_bytes())?;
        f.sync_all()?;
        drop(f);
        before_rename()?;
        fs::rename(&tmp, self.file(ckpt.epoch))?;
        File::open(&self.dir)?.sync_all()?;
        for old in self.epochs()?.into_iter().skip(RETAINED_CHECKPOINTS) {
            fs::remove_file(self.file(old))?;
        }
        Ok(())
    }

    /// The newest checkpoint that decodes cleanly and belongs to this
    /// partition, plus the number of newer files that had to be skipped.
    pub fn load_latest(&self, partition: u32) -> std::io::Result<(Option<Checkpoint>, usize)> {
        let mut skipped = 0;
        for epoch in self.epochs()? {
            let bytes = fs::read(self.file(epoch))?;
            match Checkpoint::from_bytes(&bytes) {
                Ok(c) if c.partition == partition && c.epoch == epoch => {
                    return Ok((Some(c), skipped))
                }
                Ok(_) => {
                    log::warn!("checkpoint {epoch} in {} is misplaced", self.dir.display());
                    skipped += 1;
                }
                Err(e) => {
                    log::warn!("checkpoint {epoch} in {} unreadable: {e}", self.dir.display());
                    skipped += 1;
                }
            }
        }
        Ok((None, skipped))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt(epoch: u64, m: u64, u: u64) -> Checkpoint {
        Checkpoint {
            partition: 2,
            measurement_offset: StreamOffset::new("measurements", 2, m),
            update_offset: StreamOffset::new("attribute-updates", 2, u),
            epoch,
            emitted_high_watermark: vec![(DeviceId::new("a").unwrap(), 9)],
            results_offset: StreamOffset::new("enriched", 2, m),
            dead_letter_offset: StreamOffset::new("dead-letter", 2, 0),
        }
    }

    #[test]
    fn bytes_round_trip_and_detect_corruption() {
        let c = ckpt(4, 100, 10);
        let bytes = c.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
        for i in [0, 7, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[i] ^= 0x20;
            assert!(Checkpoint::from_bytes(&bad).is_err(), "flip at {i} undetected");
        }
        assert!(Checkpoint::from_bytes(&bytes[..3]).is_err());
    }

    #[test]
    fn write_load_and_prune() {
        let root = tempfile::tempdir().unwrap();
        let dir = CheckpointDir::new(root.path(), 2);
        assert_eq!(dir.load_latest(2).unwrap(), (None, 0));
        for e in 0..5 {
            dir.write::<std::io::Error>(&ckpt(e, e * 10, e), || Ok(())).unwrap();
        }
        assert_eq!(dir.epochs().unwrap(), [4, 3, 2]);
        assert_eq!(dir.load_latest(2).unwrap(), (Some(ckpt(4, 40, 4)), 0));
    }

    #[test]
    fn abandoned_write_keeps_previous() {
        let root = tempfile::tempdir().unwrap();
        let dir = CheckpointDir::new(root.path(), 2);
        dir.write::<std::io::Error>(&ckpt(0, 5, 1), || Ok(())).unwrap();
        let r = dir.write(&ckpt(1, 9, 2), || Err(std::io::Error::other("killed")));
        assert!(r.is_err());
        assert_eq!(dir.load_latest(2).unwrap().0, Some(ckpt(0, 5, 1)));
    }

    #[test]
    fn corrupt_newest_falls_back() {
        let root = tempfile::tempdir().unwrap();
        let dir = CheckpointDir::new(root.path(), 2);
        dir.write::<std::io::Error>(&ckpt(0, 5, 1), || Ok(())).unwrap();
        dir.write::<std::io::Error>(&ckpt(1, 9, 2), || Ok(())).unwrap();
        fs::write(dir.path().join("ckpt-1"), b"garbage").unwrap();
        assert_eq!(dir.load_latest(2).unwrap(), (Some(ckpt(0, 5, 1)), 1));
        fs::write(dir.path().join("ckpt-0"), b"").unwrap();
        assert_eq!(dir.load_latest(2).unwrap(), (None, 2));
    }
}
