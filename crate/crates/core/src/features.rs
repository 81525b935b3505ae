//! Feature containers, pooling and cosine similarity.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Image,
    Ots,
    Formula,
}

/// Token-wise features `[n_t × d_f]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Array2<f64>,
    modality: Modality,
}

impl FeatureMatrix {
    pub fn new(values: Array2<f64>, modality: Modality) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::Shape("feature matrix has no tokens".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("feature matrix has non-finite entries".into()));
        }
        Ok(Self { values, modality })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn n_tokens(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }
}

/// How token features are summarized for the contrastive terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Pooling {
    #[default]
    FirstToken,
    Mean,
}

/// A unit-norm global feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledFeature(Vec<f64>);

impl PooledFeature {
    /// L2-normalizes `v`; an all-zero vector maps to e_1.
    pub fn normalize(v: ArrayView1<f64>) -> Self {
        let norm = v.dot(&v).sqrt();
        if norm > 0.0 && norm.is_finite() {
            Self(v.iter().map(|x| x / norm).collect())
        } else {
            let mut e = vec![0.0; v.len()];
            if let Some(first) = e.first_mut() {
                *first = 1.0;
            }
            Self(e)
        }
    }

    /// Wraps an already normalized vector.
    pub fn from_unit(v: Vec<f64>) -> Self {
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_array(&self) -> Array1<f64> {
        Array1::from(self.0.clone())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

pub fn pool_first_token(h: &FeatureMatrix) -> PooledFeature {
    PooledFeature::normalize(h.values.row(0))
}

pub fn pool_mean(h: &FeatureMatrix) -> PooledFeature {
    let mean = h.values.mean_axis(ndarray::Axis(0)).expect("at least one token");
    PooledFeature::normalize(mean.view())
}

pub fn pool(h: &FeatureMatrix, pooling: Pooling) -> PooledFeature {
    match pooling {
        Pooling::FirstToken => pool_first_token(h),
        Pooling::Mean => pool_mean(h),
    }
}

pub fn cosine_sim(a: &PooledFeature, b: &PooledFeature) -> f64 {
    a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum()
}

/// Stacks pooled features into `[n × d_f]` rows.
pub fn stack(features: &[PooledFeature]) -> Array2<f64> {
    let d = features.first().map_or(0, PooledFeature::dim);
    Array2::from_shape_fn((features.len(), d), |(i, j)| features[i].0[j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_token_three_four_five() {
        let h = FeatureMatrix::new(array![[3.0, 4.0, 0.0], [9.0, 9.0, 9.0]], Modality::Ots).unwrap();
        assert_eq!(pool_first_token(&h).as_slice(), &[0.6, 0.8, 0.0]);
    }

    #[test]
    fn zero_row_maps_to_basis() {
        let h = FeatureMatrix::new(array![[0.0, 0.0, 0.0]], Modality::Image).unwrap();
        assert_eq!(pool_first_token(&h).as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn norms_and_similarity_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let h = Array2::from_shape_fn((4, 16), |_| rng.random_range(-5.0..5.0));
            let a = pool_first_token(&FeatureMatrix::new(h.clone(), Modality::Image).unwrap());
            let b = pool_mean(&FeatureMatrix::new(h, Modality::Image).unwrap());
            let n: f64 = a.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            let s = cosine_sim(&a, &b);
            assert!(s.abs() <= 1.0 + 1e-9);
            assert_eq!(s, cosine_sim(&b, &a));
        }
    }

    #[test]
    fn self_and_orthogonal() {
        let a = PooledFeature::from_unit(vec![1.0, 0.0]);
        let b = PooledFeature::from_unit(vec![0.0, 1.0]);
        assert_eq!(cosine_sim(&a, &a), 1.0);
        assert_eq!(cosine_sim(&a, &b), 0.0);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(FeatureMatrix::new(array![[f64::NAN]], Modality::Image).is_err());
    }
}
