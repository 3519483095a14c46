//! Seeded, splittable random streams.
//!
//! Every consumer derives its own ChaCha stream from `(seed, stream id)`;
//! there is no global generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids used by the crate. Parameter initialization uses
/// `PARAM_BASE + k` for the k-th registered parameter.
pub mod stream {
    pub const SYNTHETIC: u64 = 1;
    pub const SHUFFLE_BASE: u64 = 1 << 20;
    pub const PARAM_BASE: u64 = 1 << 32;
    pub const VERIFY_BASE: u64 = 1 << 40;
}

pub fn rng_for(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
