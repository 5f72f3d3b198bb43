use nalgebra::{DMatrix, DVector};

use super::{soft_threshold, ChartEstimator, LevelSet, PdlMap, PieceLabel};
use crate::error::{Error, Result};

/// Soft-thresholded sample mean `S_lambda(mean(x))` on `R^N`.
///
/// Pieces: `1` where `mean > lambda`, `2` where `mean < -lambda`, `0` on the dead band.
#[derive(Debug, Clone, Copy)]
pub struct SoftThresholdMean {
    pub n: usize,
    pub lambda: f64,
}

impl SoftThresholdMean {
    pub fn new(n: usize, lambda: f64) -> Result<Self> {
        if n == 0 || !(lambda >= 0.0) {
            return Err(Error::Input(format!("need n >= 1 and lambda >= 0, got n = {n}, lambda = {lambda}")));
        }
        Ok(Self { n, lambda })
    }

    pub fn mean(&self, x: &DVector<f64>) -> f64 {
        x.sum() / self.n as f64
    }

    pub fn estimate(&self, x: &DVector<f64>) -> f64 {
        soft_threshold(self.mean(x), self.lambda)
    }

    /// The active-piece derivative `(1/N) 1^T`.
    pub fn active_jacobian(&self) -> DMatrix<f64> {
        DMatrix::from_element(1, self.n, 1.0 / self.n as f64)
    }

    pub fn level_set(&self, theta_prime: f64) -> Result<SoftThresholdLevelSet> {
        if theta_prime == 0.0 || !theta_prime.is_finite() {
            return Err(Error::Input("the zero level of the soft-threshold map is not a hypersurface".into()));
        }
        Ok(SoftThresholdLevelSet { map: *self, target: DVector::from_element(1, theta_prime) })
    }
}

impl PdlMap for SoftThresholdMean {
    fn input_dim(&self) -> usize {
        self.n
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn piece_jacobian(&self, x: &DVector<f64>) -> Result<(DMatrix<f64>, PieceLabel)> {
        let m = self.mean(x);
        Ok(if m > self.lambda {
            (self.active_jacobian(), 1)
        } else if m < -self.lambda {
            (self.active_jacobian(), 2)
        } else {
            (DMatrix::zeros(1, self.n), 0)
        })
    }
}

impl ChartEstimator for SoftThresholdMean {
    fn data_dim(&self) -> usize {
        self.n
    }

    fn chart_dim(&self) -> usize {
        1
    }

    fn chart_estimate(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        Some(DVector::from_element(1, self.estimate(x)))
    }
}

/// Hyperplane `mean(x) = theta' + lambda sign(theta')`.
#[derive(Debug, Clone)]
pub struct SoftThresholdLevelSet {
    map: SoftThresholdMean,
    target: DVector<f64>,
}

impl SoftThresholdLevelSet {
    fn offset(&self) -> f64 {
        self.map.lambda * self.target[0].signum()
    }
}

impl PdlMap for SoftThresholdLevelSet {
    fn input_dim(&self) -> usize {
        self.map.n
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn piece_jacobian(&self, x: &DVector<f64>) -> Result<(DMatrix<f64>, PieceLabel)> {
        self.map.piece_jacobian(x)
    }
}

impl LevelSet for SoftThresholdLevelSet {
    fn target(&self) -> &DVector<f64> {
        &self.target
    }

    fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, self.map.mean(x) - self.offset() - self.target[0])
    }

    fn constraint_jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.map.active_jacobian()
    }

    fn in_region(&self, x: &DVector<f64>) -> bool {
        (self.map.mean(x) - self.offset()) * self.target[0] > 0.0
    }

    fn affine_projection(&self, y0: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        let n = self.map.n as f64;
        let c = self.residual(y0)[0];
        // Stationarity x - y0 + mu / N * 1 = 0 with mean(x) fixed gives mu = N c.
        let mu = n * c;
        Some((y0.add_scalar(-c), DVector::from_element(1, mu)))
    }
}
