//! Deterministic RNG streams derived from a run seed.
//!
//! Every random decision in a run draws from a stream keyed by
//! `(seed, purpose, index, stream)`, so results never depend on how many
//! numbers some other component consumed before.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    DataOrder = 1,
    Masking = 2,
    Dropout = 3,
    Evaluation = 4,
    Probe = 5,
    Synonyms = 6,
    Synthetic = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_rng(seed: u64, purpose: Purpose, index: u64, stream: u64) -> ChaCha8Rng {
    let key = splitmix64(seed ^ splitmix64((purpose as u64) << 48 ^ splitmix64(index)));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(stream);
    rng
}
