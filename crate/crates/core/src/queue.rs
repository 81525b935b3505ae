//! Fixed-capacity ring buffers of historical pooled features used as
//! contrastive negatives.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::PooledFeature;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureQueue {
    dim: usize,
    buffer: Vec<PooledFeature>,
    write_index: usize,
}

impl FeatureQueue {
    /// Pre-fills with normalized Gaussian noise.
    pub fn new(capacity: usize, dim: usize, seed: u64) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config("queue capacity and width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let buffer = (0..capacity)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                PooledFeature::normalize(ndarray::ArrayView1::from(&v))
            })
            .collect();
        Ok(Self {
            dim,
            buffer,
            write_index: 0,
        })
    }

    /// Rebuilds a queue from stored entries and cursor.
    pub fn from_parts(dim: usize, buffer: Vec<PooledFeature>, write_index: usize) -> Result<Self> {
        if buffer.is_empty() || write_index >= buffer.len() || buffer.iter().any(|f| f.dim() != dim) {
            return Err(Error::Config("inconsistent queue contents".into()));
        }
        Ok(Self {
            dim,
            buffer,
            write_index,
        })
    }

    pub fn capacity(&self) -> usize {
        self.buffer.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn write_index(&self) -> usize {
        self.write_index
    }

    pub fn entries(&self) -> &[PooledFeature] {
        &self.buffer
    }

    /// Writes the batch at the cursor, wrapping and overwriting the oldest entries.
    pub fn push(&mut self, batch: &[PooledFeature]) {
        for f in batch {
            debug_assert_eq!(f.dim(), self.dim);
            self.buffer[self.write_index] = f.clone();
            self.write_index = (self.write_index + 1) % self.buffer.len();
        }
    }

    /// `n` distinct entries chosen uniformly, deterministic in `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<PooledFeature>> {
        Ok(self
            .sample_indices(n, seed)?
            .into_iter()
            .map(|i| self.buffer[i].clone())
            .collect())
    }

    pub fn sample_indices(&self, n: usize, seed: u64) -> Result<Vec<usize>> {
        if n > self.capacity() {
            return Err(Error::Sample {
                requested: n,
                capacity: self.capacity(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(rand::seq::index::sample(&mut rng, self.capacity(), n).into_vec())
    }

    /// Sampled entries stacked as `[n × d]`.
    pub fn sample_matrix(&self, n: usize, seed: u64) -> Result<Array2<f64>> {
        Ok(crate::features::stack(&self.sample(n, seed)?))
    }
}

pub fn queue_push(q: &mut FeatureQueue, batch: &[PooledFeature]) {
    q.push(batch)
}

pub fn queue_sample(q: &FeatureQueue, n: usize, seed: u64) -> Result<Vec<PooledFeature>> {
    q.sample(n, seed)
}
