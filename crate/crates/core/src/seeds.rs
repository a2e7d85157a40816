//! Deterministic seed derivation.
//!
//! Every randomized stage derives its own stream from a master seed, a
//! domain tag, and an index, so parallel and serial executions agree and
//! stages can be rerun in isolation.

/// SplitMix64 finalizer; good avalanche, stable across platforms.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `(master, domain, index)`.
pub fn derive(master: u64, domain: &str, index: u64) -> u64 {
    let mut h = splitmix(master);
    for b in domain.as_bytes() {
        h = splitmix(h ^ u64::from(*b));
    }
    splitmix(h ^ index)
}
