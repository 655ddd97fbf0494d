use rand::SeedableRng;
use sha2::{Digest, Sha256};

use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// A prompt embedding. Empty prompts give the zero vector with `null` set.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub null: bool,
}

impl TextEmbedding {
    /// The embedding as a `1 × d_text` row.
    pub fn to_row(&self) -> Tensor {
        Tensor::row(&self.vector).expect("finite embedding")
    }
}

/// Hashed bag-of-tokens encoder.
///
/// Each lowercase token maps to a Gaussian vector drawn from a stream keyed by
/// the SHA-256 of `(seed, token)`; vectors are mean-pooled and L2-normalized.
/// Word order is ignored, so "a pushes b" and "b pushes a" coincide.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextEncoder {
    pub d_text: usize,
    pub seed: u64,
}

impl TextEncoder {
    pub fn new(d_text: usize, seed: u64) -> Self {
        TextEncoder { d_text, seed }
    }

    pub fn tokens(prompt: &str) -> Vec<String> {
        prompt
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect()
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let digest: [u8; 32] = h.finalize().into();
        let mut r = Rng::from_seed(digest);
        rng::normal_vec(&mut r, self.d_text)
    }

    pub fn encode(&self, prompt: &str) -> TextEmbedding {
        let mut tokens = Self::tokens(prompt);
        if tokens.is_empty() {
            return TextEmbedding {
                vector: vec![0.0; self.d_text],
                null: true,
            };
        }
        // Sorted so the floating-point sum does not depend on word order.
        tokens.sort();
        let mut acc = vec![0.0; self.d_text];
        for t in &tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(t)) {
                *a += v;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        TextEmbedding {
            vector: acc.into_iter().map(|v| v / norm).collect(),
            null: false,
        }
    }
}
