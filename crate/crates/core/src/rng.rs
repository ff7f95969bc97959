//! Named random sub-streams derived from one root seed.
//!
//! Each stream is a ChaCha8 generator keyed by `(root seed, label)` with the
//! ChaCha stream id set to an index, so rollout `i` of step `s` never shares
//! state with any other consumer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// FNV-1a, used to fold stream labels into the seed.
fn label_hash(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Deterministic generator for `(seed, label, index)`.
pub fn substream(seed: u64, label: &str, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ label_hash(label));
    rng.set_stream(index);
    rng
}

/// Combine two indices into one stream id (e.g. step and group member).
pub fn pair_index(major: u64, minor: u64) -> u64 {
    major.wrapping_mul(1 << 20).wrapping_add(minor)
}
