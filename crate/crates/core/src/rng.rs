//! Seeded random streams.
//!
//! Every stochastic routine in the crate takes an explicit `&mut impl Rng`.
//! Callers that fan work out across workers derive one stream per worker with
//! [`stream`], so results never depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StdRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> StdRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `id` under a common seed.
pub fn stream(seed: u64, id: u64) -> StdRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
