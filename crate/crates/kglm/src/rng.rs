//! Deterministic RNG derivation.
//!
//! Every random decision draws from a generator derived from (seed, purpose,
//! index). Resuming at step k therefore needs no serialized RNG state: the
//! step's generators are reconstructed from the step number alone.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Purpose tag separating random streams that share a seed.
#[derive(Copy, Clone, Debug)]
#[repr(u64)]
pub enum StreamTag {
    ParamInit = 1,
    WalkRoots = 2,
    Walk = 3,
    NeighborSample = 4,
    NodeSample = 5,
    TextBatch = 6,
    TokenMask = 7,
    MentionMask = 8,
    Candidates = 9,
    Split = 10,
    World = 11,
    Eval = 12,
    Finetune = 13,
    Episode = 14,
    Triplets = 15,
}

/// Collision-resistant sub-seed from (seed, tag, index); splitmix64 finalizer.
pub fn mix(seed: u64, tag: StreamTag, index: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((tag as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(index.wrapping_mul(0x94D0_49BB_1331_11EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn chacha(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Generator for one (seed, purpose, index) triple.
pub fn derive(seed: u64, tag: StreamTag, index: u64) -> ChaCha20Rng {
    chacha(mix(seed, tag, index))
}
