//! Seeded random streams. All randomness flows from one root seed through
//! named substreams so that data order is identical across runs and modes.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::hash::Fnv1a;

/// Deterministic RNG for a named purpose under a root seed.
pub fn substream(root_seed: u64, label: &str) -> ChaCha8Rng {
    let mut h = Fnv1a::new();
    h.update(&root_seed.to_le_bytes());
    h.update(label.as_bytes());
    ChaCha8Rng::seed_from_u64(h.finish())
}
