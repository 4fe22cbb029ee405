//! Deterministic per-task random streams.
//!
//! Every source of randomness in the crate is a ChaCha stream keyed by
//! `(master seed, context tag, index)`, so parallel loops over bootstrap
//! replicates, Monte Carlo replications, or SIMEX draws produce identical
//! results regardless of scheduling, and growing a loop bound leaves
//! earlier indices unchanged.

use rand_chacha::ChaCha12Rng;
use rand::SeedableRng;

/// Context tags; distinct tags keep streams disjoint even at equal indices.
pub mod tag {
    pub const BOOTSTRAP: u64 = 1;
    pub const REPLICATION: u64 = 2;
    pub const SIMEX: u64 = 3;
    pub const FOLDS: u64 = 4;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream keyed by `(seed, tag, index)`.
pub fn stream(seed: u64, tag: u64, index: u64) -> ChaCha12Rng {
    let mut state = seed ^ tag.rotate_left(32) ^ index.wrapping_mul(0xd134_2543_de82_ef95);
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha12Rng::from_seed(bytes)
}
