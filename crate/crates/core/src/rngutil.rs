//! Deterministic RNG stream derivation.
//!
//! Every random decision in a run draws from a stream derived purely from
//! `(master seed, step, stream kind, slot)`. Streams are independent, so
//! augmentation of different samples could run in parallel workers, and a
//! resumed run replays the exact randomness of the uninterrupted one without
//! carrying generator state across checkpoints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a derived stream is used for. The discriminant feeds the seed mix, so
/// renumbering changes every downstream random sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamKind {
    BatchSelect = 1,
    WeakLabeled = 2,
    WeakUnlabeled = 3,
    CutMix = 4,
    CopyPaste = 5,
    PixelSample = 6,
    SceneGen = 7,
    Partition = 8,
    ValSceneGen = 9,
    CutMixPool = 10,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a sequence of words into a single 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut state = 0x243F_6A88_85A3_08D3; // arbitrary nonzero offset
    let mut acc = 0u64;
    for &p in parts {
        state ^= p;
        acc ^= splitmix64(&mut state);
    }
    acc
}

/// Derive the RNG stream for one purpose at one point of a run.
pub fn stream_rng(seed: u64, step: u64, kind: StreamKind, slot: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(&[seed, step, kind as u64, slot]))
}
