//! Deterministic stand-in for a frozen sentence encoder.

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const MIN_TEXT_DIM: usize = 8;

/// Maps a token list to a fixed-length vector.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, tokens: &[String]) -> Vec<f64>;
}

/// Mean of per-token Gaussian vectors, each seeded by a stable 64-bit hash
/// of the token, scaled by `1/sqrt(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedBagEncoder {
    dim: usize,
    seed: u64,
}

impl HashedBagEncoder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < MIN_TEXT_DIM {
            return Err(Error::Config(format!("text dim {dim} < {MIN_TEXT_DIM}")));
        }
        Ok(Self { dim, seed })
    }
}

pub fn token_hash(token: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(token.as_bytes());
    h.finish()
}

impl TextEncoder for HashedBagEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, tokens: &[String]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        if tokens.is_empty() {
            return out;
        }
        // Sorting makes the float summation order independent of token order.
        let mut hashes: Vec<u64> = tokens.iter().map(|t| token_hash(t)).collect();
        hashes.sort_unstable();
        for h in hashes {
            let mut rng = ChaCha8Rng::seed_from_u64(h ^ self.seed);
            for o in out.iter_mut() {
                *o += rng.sample::<f64, _>(StandardNormal);
            }
        }
        let k = 1.0 / (tokens.len() as f64 * (self.dim as f64).sqrt());
        out.iter_mut().for_each(|o| *o *= k);
        out
    }
}

/// Free-function form of [`HashedBagEncoder::encode`].
pub fn encode_text(tokens: &[String], t: usize, seed: u64) -> Result<Vec<f64>> {
    Ok(HashedBagEncoder::new(t, seed)?.encode(tokens))
}
