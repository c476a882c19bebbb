//! Seed derivation for independent, reproducible RNG streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed, a numeric index and a purpose tag.
pub fn derive(parent: u64, index: u64, tag: &str) -> u64 {
    let mut h = mix64(parent ^ mix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)));
    for b in tag.bytes() {
        h = mix64(h ^ u64::from(b));
    }
    h
}

/// Stable 64-bit hash of a text key (FNV-1a), used to key per-problem streams.
pub fn text_key(s: &str) -> u64 {
    crate::featurize::fnv1a(crate::featurize::FNV_OFFSET, s.as_bytes())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
