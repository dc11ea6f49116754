//! Deterministic RNG stream derivation.
//!
//! Every random decision in the crate draws from a ChaCha8 stream whose key
//! is derived from (seed, stream tag, index) with splitmix64. Streams are
//! independent per sample / per tensor / per sweep cell, so work can be
//! redone or parallelized without replaying a global generator.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Fixed values are part of the reproducibility contract:
/// changing one changes every derived dataset and run.
pub mod stream {
    pub const TRAIN_SAMPLES: u64 = 0x01;
    pub const VAL_SAMPLES: u64 = 0x02;
    pub const TRAIN_FEATURES: u64 = 0x03;
    pub const VAL_FEATURES: u64 = 0x04;
    pub const MODEL_INIT: u64 = 0x05;
    pub const SHUFFLE: u64 = 0x06;
    pub const SIZE_TABLE: u64 = 0x07;
    pub const SWEEP_CELL: u64 = 0x08;
}

pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix an arbitrary list of 64-bit parts into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut state = 0x51_7c_c1_b7_27_22_0a_95u64;
    let mut out = 0u64;
    for &p in parts {
        state ^= p;
        out = splitmix64(&mut state);
    }
    out
}

/// ChaCha8 generator keyed from the mixed parts.
pub fn derive_rng(parts: &[u64]) -> ChaCha8Rng {
    let mut state = derive_seed(parts);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
