//! Deterministic seed derivation so parallel work and pipeline stages get
//! independent, reproducible RNG streams from one master seed.

/// FNV-1a mix of the master seed, a domain tag and an index.
pub fn derive(master: u64, tag: &str, index: u64) -> u64 {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut h = OFFSET;
    let mut step = |byte: u8| {
        h ^= byte as u64;
        h = h.wrapping_mul(PRIME);
    };
    for b in master.to_le_bytes() {
        step(b);
    }
    for b in tag.as_bytes() {
        step(*b);
    }
    for b in index.to_le_bytes() {
        step(b);
    }
    h
}
