//! Keyed random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream whose key is a
//! tuple of counters (base seed, run, lane, index). Streams for different keys
//! are independent, so runs and snapshots can be generated in any order or in
//! parallel and still reproduce bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Lane used for snapshot amplitudes and sensor noise.
pub const LANE_SNAPSHOT: u64 = 0x5EED_0001;
/// Lane used for multiplicative dictionary perturbations.
pub const LANE_PERTURBATION: u64 = 0x5EED_0002;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Returns the generator for key `(seed, run, lane, index)`.
pub fn keyed_stream(seed: u64, run: u64, lane: u64, index: u64) -> ChaCha8Rng {
    let mut state = seed;
    let mut key = [0u8; 32];
    for (chunk, word) in key.chunks_exact_mut(8).zip([run, lane, index, 0]) {
        state ^= word;
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Derives the seed of Monte-Carlo run `run` from an experiment seed.
pub fn run_seed(seed: u64, run: u64) -> u64 {
    let mut state = seed ^ run.wrapping_mul(0xD1B5_4A32_D192_ED03);
    splitmix64(&mut state)
}
