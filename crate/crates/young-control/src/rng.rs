//! Reproducible random streams.
//!
//! Every Monte Carlo path (and every raster bin) gets its own ChaCha8
//! stream: the 64-bit run seed selects the key and the path index selects
//! the stream counter. A path's draws therefore depend only on
//! `(seed, path_index)`, never on scheduling or worker count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream for one Monte Carlo path.
pub fn path_stream(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path.wrapping_add(1));
    rng
}

/// Stream for auxiliary draws (restart initialisation, raster sampling).
/// `domain` separates independent users of the same run seed.
pub fn domain_stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index.wrapping_add(1));
    rng
}
