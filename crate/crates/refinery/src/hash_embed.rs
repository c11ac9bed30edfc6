//! Deterministic bag-of-words embedder for tests and offline runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backend::EmbeddingBackend;
use crate::error::BackendError;

/// Sums one seeded Gaussian direction per token occurrence and normalizes the
/// result. Texts sharing tokens share directions; disjoint texts are nearly
/// orthogonal for large `dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    fn direction(&self, token: &str) -> impl Iterator<Item = f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(token.as_bytes()));
        (0..self.dim).map(move |_| StandardNormal.sample(&mut rng))
    }
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl EmbeddingBackend for HashEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(BackendError::Response("text has no tokens to embed".into()));
        }
        let mut v = vec![0.0; self.dim];
        for t in &tokens {
            for (acc, x) in v.iter_mut().zip(self.direction(t)) {
                *acc += x;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(BackendError::Response("zero embedding".into()));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}
