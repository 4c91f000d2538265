//! Deterministic per-purpose random streams.
//!
//! Every source of randomness in a run is a ChaCha stream seeded from the
//! run's root seed, the task index, and a short purpose label. Streams are
//! therefore independent of each other and of how often the others are
//! drawn from, which is what makes checkpoint resume bit-exact: a resumed
//! run re-derives exactly the streams the interrupted run would have used.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mix root seed, task index, and purpose label into one 64-bit seed.
pub fn derive_seed(root: u64, task: usize, purpose: &str) -> u64 {
    // FNV-1a over the inputs, then a splitmix64 finalizer to spread bits
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in root
        .to_le_bytes()
        .iter()
        .chain((task as u64).to_le_bytes().iter())
        .chain(purpose.as_bytes().iter())
    {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded stream for one purpose within one task.
pub fn stream(root: u64, task: usize, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, task, purpose))
}
