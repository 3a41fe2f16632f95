//! Deterministic RNG substreams.
//!
//! A run has a single master seed. Every consumer of randomness derives its
//! own ChaCha stream from `(seed, round, purpose, index)`, so results do not
//! depend on the order in which parallel work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Independent uses of randomness within a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Sampling = 2,
    LocalTraining = 3,
    Noise = 4,
    Synthesis = 5,
    Probe = 6,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derives a 256-bit ChaCha key from the master seed and the stream coordinates.
pub fn substream(seed: u64, round: u64, purpose: Purpose, index: u64) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    let mut state = splitmix64(seed);
    for (i, word) in [round, purpose as u64, index, 0].into_iter().enumerate() {
        state = splitmix64(state ^ splitmix64(word.wrapping_add(i as u64)));
        key[i * 8..(i + 1) * 8].copy_from_slice(&state.to_le_bytes());
    }
    ChaCha20Rng::from_seed(key)
}
