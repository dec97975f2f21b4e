//! Low-rank adapters with rank-stabilized scaling `s = alpha / sqrt(r)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{FactorPair, Matrix};

/// `alpha / sqrt(rank)`.
#[inline]
pub fn rslora_scale(alpha: f64, rank: usize) -> f64 {
    alpha / (rank as f64).sqrt()
}

/// Adapter factors `B (m x r)` and `A (r x n)` plus the scaling numerator.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    factors: FactorPair,
    alpha: f64,
}

impl LoraAdapter {
    pub fn new(b: Matrix, a: Matrix, alpha: f64) -> Result<Self> {
        Self::from_factors(FactorPair::new(b, a)?, alpha)
    }

    pub fn from_factors(factors: FactorPair, alpha: f64) -> Result<Self> {
        if !alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be finite, got {alpha}")));
        }
        Ok(LoraAdapter { factors, alpha })
    }

    pub fn b(&self) -> &Matrix {
        &self.factors.b
    }

    pub fn a(&self) -> &Matrix {
        &self.factors.a
    }

    pub fn factors(&self) -> &FactorPair {
        &self.factors
    }

    pub fn into_factors(self) -> FactorPair {
        self.factors
    }

    pub(crate) fn factors_mut(&mut self) -> &mut FactorPair {
        &mut self.factors
    }

    pub fn rank(&self) -> usize {
        self.factors.rank()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scale(&self) -> f64 {
        rslora_scale(self.alpha, self.rank())
    }

    /// Unscaled product `B A`.
    pub fn delta(&self) -> Result<Matrix> {
        self.factors.product()
    }
}

/// `B = 0`, `A ~ U(-sqrt(6/n), sqrt(6/n))` with fan-in `n`.
pub fn init_kaiming_zero<R: Rng + ?Sized>(
    m: usize,
    n: usize,
    r: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<LoraAdapter> {
    let max = m.min(n);
    if r == 0 || r > max {
        return Err(Error::Rank {
            rank: r,
            rows: m,
            cols: n,
            max,
        });
    }
    LoraAdapter::new(Matrix::zeros(m, r)?, kaiming_uniform(r, n, rng)?, alpha)
}

/// `rows x fan_in` matrix with entries uniform on `[-sqrt(6/fan_in), sqrt(6/fan_in)]`.
pub fn kaiming_uniform<R: Rng + ?Sized>(rows: usize, fan_in: usize, rng: &mut R) -> Result<Matrix> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Matrix::from_fn(rows, fan_in, |_, _| rng.random_range(-bound..bound))
}

/// A frozen weight matrix and the adapter attached to it.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub backbone: Matrix,
    pub adapter: LoraAdapter,
}

impl LayerState {
    pub fn new(backbone: Matrix, adapter: LoraAdapter) -> Result<Self> {
        let expected = (adapter.b().rows(), adapter.a().cols());
        if backbone.shape() != expected {
            return Err(Error::Shape {
                op: "LayerState::new",
                lhs: backbone.shape(),
                rhs: expected,
            });
        }
        Ok(LayerState { backbone, adapter })
    }

    pub fn effective_weight(&self) -> Result<Matrix> {
        effective_weight(self)
    }
}

/// `W + s B A`.
pub fn effective_weight(layer: &LayerState) -> Result<Matrix> {
    let delta = layer.adapter.delta()?;
    if delta.shape() != layer.backbone.shape() {
        return Err(Error::Shape {
            op: "effective_weight",
            lhs: layer.backbone.shape(),
            rhs: delta.shape(),
        });
    }
    layer.backbone.add_scaled(layer.adapter.scale(), &delta)
}

#[cfg(test)]
mod tests {
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::linalg::svd_exact;

    #[test]
    fn kaiming_zero_has_zero_b_and_neutral_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let adapter = init_kaiming_zero(5, 7, 2, 4.0, &mut rng).unwrap();
        assert!(adapter.b().is_zero());
        let backbone = Matrix::from_fn(5, 7, |i, j| (i as f64) - 0.5 * j as f64).unwrap();
        let layer = LayerState::new(backbone.clone(), adapter).unwrap();
        assert_eq!(layer.effective_weight().unwrap(), backbone);
    }

    #[test]
    fn kaiming_variance_matches_fan_in() {
        let n = 50;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = kaiming_uniform(200, n, &mut rng).unwrap();
        let vals = a.data();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
        let expected = 2.0 / n as f64;
        assert!((var - expected).abs() < 0.2 * expected, "{var} vs {expected}");
        let bound = (6.0 / n as f64).sqrt();
        assert!(vals.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn scale_is_rslora() {
        let adapter = LoraAdapter::new(Matrix::zeros(3, 2).unwrap(), Matrix::zeros(2, 3).unwrap(), 4.0).unwrap();
        assert_eq!(adapter.scale(), 4.0 / 2f64.sqrt());
        assert!((adapter.scale() - 2.828_427_1).abs() < 1e-7);
    }

    #[test]
    fn delta_is_unscaled_outer_product() {
        let adapter = LoraAdapter::new(
            Matrix::from_rows(&[[1.0], [2.0]]).unwrap(),
            Matrix::from_rows(&[[3.0, 4.0]]).unwrap(),
            8.0,
        )
        .unwrap();
        assert_eq!(adapter.delta().unwrap().data(), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn delta_rank_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = kaiming_uniform(6, 2, &mut rng).unwrap();
        let a = kaiming_uniform(2, 5, &mut rng).unwrap();
        let adapter = LoraAdapter::new(b, a, 1.0).unwrap();
        let svd = svd_exact(&adapter.delta().unwrap()).unwrap();
        assert!(svd.sigma.iter().filter(|&&s| s > 1e-10).count() <= 2);
    }

    #[test]
    fn layer_rejects_mismatched_adapter() {
        let adapter = LoraAdapter::new(Matrix::zeros(3, 1).unwrap(), Matrix::zeros(1, 4).unwrap(), 1.0).unwrap();
        assert!(LayerState::new(Matrix::zeros(4, 3).unwrap(), adapter).is_err());
    }
}
