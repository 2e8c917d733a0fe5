//! Deterministic derivation of independent random streams from a master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random-stream purposes within one repetition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    /// Training samples.
    Data = 1,
    /// Evaluation batches.
    Eval = 2,
    /// Random-walk increments of the drifting parameter.
    Walk = 3,
    /// Dataset shard order.
    Shuffle = 4,
    /// Monte-Carlo estimates used by theory overlays.
    Theory = 5,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a master seed with a path of indices.
pub fn derive(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(master), |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Generator for `stream` within repetition `rep`.
pub fn rng_for(master: u64, rep: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, &[rep, stream as u64]))
}
