//! Key-to-partition routing.
//!
//! Measurements, attribute updates and enriched results are all keyed by
//! device id, so every record of one device lands in the same partition of
//! every topic with the same partition count.

use crate::model::DeviceId;

const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET_BASIS;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Partition index for `key` among `partitions`.
///
/// # Panics
///
/// If `partitions` is zero.
pub fn partition_for(key: &[u8], partitions: u32) -> u32 {
    assert!(partitions >= 1, "partition count must be positive");
    (fnv1a64(key) % u64::from(partitions)) as u32
}

pub fn partition_for_device(device: &DeviceId, partitions: u32) -> u32 {
    partition_for(device.as_bytes(), partitions)
}
