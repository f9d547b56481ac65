use rand::Rng;

use super::graph::{Graph, Var};
use super::layers::{Linear, Module};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const COSINE_BASIS: usize = 64;

/// `cos(kπτ)` for `k = 0..basis`, one row per level.
pub fn cosine_features(taus: &[f64], basis: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(taus.len() * basis);
    for &t in taus {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TauOutOfRange(t));
        }
        data.extend((0..basis).map(|k| (k as f64 * std::f64::consts::PI * t).cos()));
    }
    Tensor::from_vec(taus.len(), basis, data)
}

/// Quantile-level embedding `h: [0,1] → R^d`: cosine basis, one affine
/// layer, rectified-linear.
#[derive(Clone, Debug, PartialEq)]
pub struct TauEmbedding {
    pub linear: Linear,
}

impl TauEmbedding {
    pub fn new(dim: usize, rng: &mut impl Rng) -> Self {
        TauEmbedding {
            linear: Linear::new(COSINE_BASIS, dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.linear.output_dim()
    }

    pub fn basis(&self) -> usize {
        self.linear.input_dim()
    }

    /// `features` are [`cosine_features`] of the levels, as a constant.
    pub fn forward(&self, g: &mut Graph, p: &[Var], features: Var) -> Result<Var> {
        let h = self.linear.forward(g, p, features)?;
        Ok(g.relu(h))
    }

    pub fn embed(&self, taus: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let f = g.constant(cosine_features(taus, self.basis())?);
        let out = self.forward(&mut g, &p, f)?;
        Ok(g.value(out).clone())
    }
}

impl Module for TauEmbedding {
    fn params(&self) -> Vec<&Tensor> {
        self.linear.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.linear.params_mut()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_level_has_unit_features() {
        let f = cosine_features(&[0.0], COSINE_BASIS).unwrap();
        assert!(f.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn out_of_range_levels_fail() {
        assert!(matches!(
            cosine_features(&[1.5], 8),
            Err(Error::TauOutOfRange(_))
        ));
        assert!(cosine_features(&[-0.01], 8).is_err());
    }

    #[test]
    fn embedding_is_deterministic_and_separates_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = TauEmbedding::new(32, &mut rng);
        let grid: Vec<f64> = (1..50).map(|i| i as f64 / 50.0).collect();
        let a = e.embed(&grid).unwrap();
        assert_eq!(a, e.embed(&grid).unwrap());
        for i in 0..grid.len() {
            for j in i + 1..grid.len() {
                assert_ne!(a.row(i), a.row(j), "levels {} and {} collide", grid[i], grid[j]);
            }
        }
    }
}
