use nalgebra::{DMatrix, DVector};

use super::{AffineConstraint, ChartEstimator, PdlMap, PieceLabel};
use crate::error::{Error, Result};

/// Least-squares estimator `theta_hat(x) = (X^T X)^{-1} X^T x` for a fixed N x k design.
///
/// It is smooth everywhere, so its level sets are affine without any region truncation.
#[derive(Debug, Clone)]
pub struct LinearGaussian {
    design: DMatrix<f64>,
    g: DMatrix<f64>,
}

impl LinearGaussian {
    pub fn new(design: DMatrix<f64>) -> Result<Self> {
        if design.ncols() == 0 || design.ncols() > design.nrows() {
            return Err(Error::Input(format!("design must be tall with k >= 1, got {:?}", design.shape())));
        }
        let chol = design
            .tr_mul(&design)
            .cholesky()
            .ok_or_else(|| Error::Singular("design has dependent columns".into()))?;
        let g = chol.solve(&design.transpose());
        Ok(Self { design, g })
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn jacobian(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn estimate(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.g * x
    }

    pub fn level_set(&self, theta_prime: DVector<f64>) -> Result<AffineConstraint> {
        AffineConstraint::new(self.g.clone(), theta_prime)
    }
}

impl PdlMap for LinearGaussian {
    fn input_dim(&self) -> usize {
        self.design.nrows()
    }

    fn output_dim(&self) -> usize {
        self.design.ncols()
    }

    fn piece_jacobian(&self, _x: &DVector<f64>) -> Result<(DMatrix<f64>, PieceLabel)> {
        Ok((self.g.clone(), 0))
    }
}

impl ChartEstimator for LinearGaussian {
    fn data_dim(&self) -> usize {
        self.design.nrows()
    }

    fn chart_dim(&self) -> usize {
        self.design.ncols()
    }

    fn chart_estimate(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        Some(self.estimate(x))
    }
}
