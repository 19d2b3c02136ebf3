//! Seed derivation for reproducible, schedule-independent random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent generator for `(seed, stream)`; distinct streams never overlap.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids for the per-run generators of a Monte Carlo experiment.
pub mod streams {
    pub fn truth(run: u64) -> u64 {
        run * 4
    }

    pub fn scans(run: u64) -> u64 {
        run * 4 + 1
    }
}
