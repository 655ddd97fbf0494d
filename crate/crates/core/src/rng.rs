//! Seeded random streams.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] derived from a
//! root seed and a stream name, so results are portable across platforms and
//! independent of thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives a 64-bit seed for the named substream of `root`.
pub fn substream_seed(root: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Opens the named substream of `root`.
pub fn stream(root: u64, name: &str) -> Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(root, name))
}

/// Opens the `index`-th member of a named family of substreams (per sample, per epoch, ...).
pub fn indexed_stream(root: u64, name: &str, index: u64) -> Rng {
    stream(substream_seed(root, name), &index.to_string())
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}
