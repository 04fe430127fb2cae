use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent deterministic stream keyed by `(seed, stream)`.
///
/// Work items draw from their own stream so results do not depend on the
/// order in which they are processed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a child seed. Index 0 maps to the parent seed itself.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}
