//! Hierarchical random streams.
//!
//! Every draw in the crate comes from a stream keyed by the master seed plus a
//! path such as `(k, sample_id, purpose)`. Streams never share state, so adding
//! an estimator or reordering work cannot perturb an existing draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags that separate streams drawn for the same unit of work.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Covariates = 1,
    Correlation = 2,
    Noise = 3,
    Assignment = 4,
    FisherDraws = 5,
    PairSwitch = 6,
    Reference = 7,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives a 32-byte ChaCha seed from the master seed and a path.
pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    let mut state = splitmix64(seed);
    for &p in path {
        state = splitmix64(state ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    let mut key = [0u8; 32];
    let mut s = state;
    for chunk in key.chunks_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// A 64-bit child seed for the given path, used to hand a whole unit of work
/// its own master seed.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    let mut state = splitmix64(seed);
    for &p in path {
        state = splitmix64(state ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    splitmix64(state ^ 0xD6E8_FEB8_6659_FD93)
}
