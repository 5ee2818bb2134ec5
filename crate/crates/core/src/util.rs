//! Small deterministic hashing helpers shared across modules.

/// FNV-1a 64-bit hash. Used for label hashing and cheap content
/// fingerprints where cryptographic strength is irrelevant but
/// platform-stable output matters.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// SplitMix64 finalizer. One round is enough to decorrelate seeds that
/// differ in a single bit.
pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Stage seed derived from the global seed and a stage label. The label
/// hash decorrelates stages; the finalizer decorrelates nearby global
/// seeds.
pub(crate) fn derive_seed(base: u64, label: &str) -> u64 {
    splitmix64(base ^ fnv1a64(label.as_bytes()))
}

/// Per-item seed within a stage (sample index, epoch number, ...).
pub(crate) fn derive_seed_indexed(section_seed: u64, index: u64) -> u64 {
    splitmix64(section_seed ^ index.wrapping_mul(0xa24baed4963ee407))
}
