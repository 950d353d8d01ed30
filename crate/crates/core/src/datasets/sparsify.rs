use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DenseDataset;
use crate::error::{Error, Result};

/// Keep/drop mask over an `n × k` reading matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparseMask {
    mask: Array2<u8>,
    dropout_bits: u64,
    seed: u64,
}

impl SparseMask {
    pub(crate) fn from_parts(mask: Array2<u8>, dropout: f64, seed: u64) -> Self {
        Self {
            mask,
            dropout_bits: dropout.to_bits(),
            seed,
        }
    }

    /// Mask with every entry kept.
    pub fn full(n: usize, k: usize) -> Self {
        Self::from_parts(Array2::ones((n, k)), 0.0, 0)
    }

    /// Builds the mask directly from a 0/1 matrix (test fixtures, loaded masks).
    pub fn from_matrix(mask: Array2<u8>) -> Result<Self> {
        if mask.iter().any(|&m| m > 1) {
            return Err(Error::Dataset("mask entries must be 0 or 1".into()));
        }
        Ok(Self::from_parts(mask, f64::NAN, 0))
    }

    pub fn mask(&self) -> &Array2<u8> {
        &self.mask
    }

    pub fn dropout(&self) -> f64 {
        f64::from_bits(self.dropout_bits)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_kept(&self, t: usize, sensor: usize) -> bool {
        self.mask[[t, sensor]] == 1
    }

    pub fn kept(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    /// Fraction of kept entries.
    pub fn keep_rate(&self) -> f64 {
        self.kept() as f64 / self.mask.len().max(1) as f64
    }
}

/// Bernoulli sparsification: every `(timestep, sensor)` entry draws
/// `P_keep ~ U[0, 1]` and is kept iff `P_keep > dropout`.
///
/// Draws come from ChaCha8 seeded with `seed`, consumed in row-major order
/// (timestep outer, sensor inner). Each draw is `1 - u` with `u ∈ [0, 1)`,
/// i.e. lies in `(0, 1]`, so `dropout = 0` keeps everything and `dropout = 1`
/// keeps nothing.
pub fn sparsify(dataset: &DenseDataset, dropout: f64, seed: u64) -> Result<SparseMask> {
    sparsify_shape(dataset.n(), dataset.k(), dropout, seed)
}

pub(crate) fn sparsify_shape(n: usize, k: usize, dropout: f64, seed: u64) -> Result<SparseMask> {
    if !(0.0..=1.0).contains(&dropout) {
        return Err(Error::Dropout(dropout));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = Array2::zeros((n, k));
    for i in 0..n {
        for j in 0..k {
            let keep: f64 = 1.0 - rng.random::<f64>();
            if keep > dropout {
                mask[[i, j]] = 1;
            }
        }
    }
    Ok(SparseMask::from_parts(mask, dropout, seed))
}
