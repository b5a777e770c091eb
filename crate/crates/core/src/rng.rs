//! Seed derivation: one master seed, independent per-purpose streams.
//!
//! Every source of randomness in an experiment draws from its own stream so
//! that toggling one component (say, PatchMix) never perturbs the draws of
//! another (say, weight init). A stream is identified by a purpose string
//! and an index (usually the session number):
//!
//! ```text
//! stream_seed = splitmix64( splitmix64( master ^ fnv1a64(purpose) ) ^ index )
//! rng         = ChaCha8Rng::seed_from_u64(stream_seed)
//! ```

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for the derived streams.
pub mod purpose {
    /// Weight initialisation.
    pub const INIT: &str = "init";
    /// CutMix feature-mixing masks.
    pub const MASK: &str = "mask";
    /// PatchMix augmentation (fire decision, bank pick, cell sampling).
    pub const PATCHMIX: &str = "patchmix";
    /// Self-supervision view transforms.
    pub const SSL_TRANSFORM: &str = "ssl-transform";
    /// Shuffling, few-shot support sampling, exemplar selection.
    pub const SAMPLING: &str = "sampling";
    /// Synthetic dataset generation.
    pub const DATA: &str = "data";
    /// Classifier-expansion sample draws.
    pub const EXPAND: &str = "expand";
    /// K-means exemplar selection.
    pub const EXEMPLAR: &str = "exemplar";
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive the deterministic stream for `(master, purpose, index)`.
pub fn stream(master: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let seed = splitmix64(splitmix64(master ^ fnv1a64(purpose.as_bytes())) ^ index);
    ChaCha8Rng::seed_from_u64(seed)
}
