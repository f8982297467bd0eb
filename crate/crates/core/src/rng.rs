//! Counter-keyed random streams.
//!
//! Every random draw in a run comes from a stream identified by
//! `(global seed, purpose, key words...)`, e.g. `(shuffle_seed, SHUFFLE_SELECT,
//! step, layer, block)`. The key is hashed into a ChaCha8 seed, so a stream
//! can be opened at any point of a run without replaying earlier draws. This
//! is what makes plans independent of worker count and makes resume bitwise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags separating independent stream families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    DataOrder = 2,
    Jitter = 3,
    Hetero = 4,
    ShuffleSelect = 5,
    ShuffleCount = 6,
    ShufflePerm = 7,
    Synthetic = 8,
    ToyNoise = 9,
    ToyShuffle = 10,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a key into 32 bytes of seed material.
fn derive_seed(seed: u64, purpose: Purpose, words: &[u64]) -> [u8; 32] {
    let mut h = splitmix(seed ^ splitmix(purpose as u64));
    for &w in words {
        h = splitmix(h ^ splitmix(w.wrapping_add(h.rotate_left(17))));
    }
    h = splitmix(h ^ words.len() as u64);
    let mut out = [0u8; 32];
    for (k, chunk) in out.chunks_exact_mut(8).enumerate() {
        h = splitmix(h.wrapping_add(k as u64));
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    out
}

/// Opens the stream keyed by `(seed, purpose, words)`.
pub fn stream(seed: u64, purpose: Purpose, words: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(seed, purpose, words))
}

/// Derives a child seed, used to give sweep entries distinct seeds.
pub fn derive_u64(seed: u64, words: &[u64]) -> u64 {
    let bytes = derive_seed(seed, Purpose::Init, words);
    u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
}
