//! Deterministic derivation of independent RNG streams.
//!
//! Every randomized component (encoder init, texture branch init,
//! discriminator init, data generation, shuffling) draws from its own
//! stream derived from the master seed and a component label. Adding or
//! removing one component therefore never shifts the draws of another,
//! which is what makes trajectory-equality tests across model wirings
//! possible at all.

use rand::rngs::StdRng;
use rand::SeedableRng;

/// FNV-1a over the label, mixed with the master seed through splitmix64.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(master ^ h)
}

/// A seeded stream for one named component of a run.
pub fn stream(master: u64, label: &str) -> StdRng {
    StdRng::seed_from_u64(derive_seed(master, label))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
