//! Estimators, their conservative Jacobians, and the level sets they induce.

mod constraints;
mod data;
mod lasso;
mod likelihood;
mod linear;
mod toy;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

pub use constraints::{AffineConstraint, SphereConstraint};
pub use data::{gen_toeplitz_data, Dataset, DatasetMeta};
pub use lasso::{
    lasso_fit, lasso_fit_warm, lasso_jacobian, lasso_objective, lambda_max, EstimatorResult, LassoChart, LassoLevelSet,
    LassoOptions,
};
pub use likelihood::{log_likelihood, LikelihoodKind, LikelihoodSpec};
pub use linear::LinearGaussian;
pub use toy::{SoftThresholdLevelSet, SoftThresholdMean};

/// Identifier of the smooth piece that contains a point.
pub type PieceLabel = u64;

/// How a Jacobian element was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianSource {
    Frechet,
    SjoSelection,
    Stca,
    Gtp,
}

/// A k x N element of the conservative Jacobian of an estimator at a point.
#[derive(Debug, Clone)]
pub struct ConservativeJacobian {
    pub matrix: DMatrix<f64>,
    pub source: JacobianSource,
}

impl ConservativeJacobian {
    pub fn new(matrix: DMatrix<f64>, source: JacobianSource) -> Self {
        Self { matrix, source }
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    /// Whether the element has full row rank.
    pub fn is_full_rank(&self) -> bool {
        let k = self.rows();
        k == 0 || linalg::numerical_rank(&self.matrix, linalg::RANK_TOL) == k
    }
}

/// `sqrt(det(G G^T))`, computed as the product of the singular values of `G`.
pub fn jacobian_factor(j: &ConservativeJacobian) -> Result<f64> {
    log_jacobian_factor(j).map(f64::exp)
}

/// Natural log of [`jacobian_factor`].
pub fn log_jacobian_factor(j: &ConservativeJacobian) -> Result<f64> {
    let k = j.rows();
    if k == 0 {
        return Ok(0.0);
    }
    if k > j.cols() {
        return Err(Error::Singular(format!("{k} x {} Jacobian cannot have full row rank", j.cols())));
    }
    let s = linalg::singular_values(&j.matrix);
    let smax = s[0];
    let smin = s[k - 1];
    if !(smax > 0.0) || smin <= linalg::RANK_TOL * smax {
        return Err(Error::Singular(format!("rank-deficient Jacobian (s_min = {smin:.3e})")));
    }
    Ok(s[..k].iter().map(|v| v.ln()).sum())
}

/// Soft-thresholding `sign(v) * max(|v| - lambda, 0)`.
pub fn soft_threshold(v: f64, lambda: f64) -> f64 {
    if v > lambda {
        v - lambda
    } else if v < -lambda {
        v + lambda
    } else {
        0.0
    }
}

/// A piecewise-smooth map `R^N -> R^k` whose classical derivative exists off a null set.
pub trait PdlMap: Send + Sync {
    fn input_dim(&self) -> usize;

    fn output_dim(&self) -> usize;

    /// Classical derivative at `x` together with the label of the smooth piece containing `x`.
    fn piece_jacobian(&self, x: &DVector<f64>) -> Result<(DMatrix<f64>, PieceLabel)>;

    /// Derivatives at `points`, all within `radius` of `center`.
    fn piece_jacobians_near(
        &self,
        center: &DVector<f64>,
        radius: f64,
        points: &[DVector<f64>],
    ) -> Result<Vec<(DMatrix<f64>, PieceLabel)>> {
        let _ = (center, radius);
        points.iter().map(|p| self.piece_jacobian(p)).collect()
    }
}

/// Level set `{x : m(x) = target}` of a piecewise-smooth map.
///
/// The constraint functions use the smooth extension of the piece that carries the level set;
/// `in_region` reports whether that extension agrees with the estimator at a point.
pub trait LevelSet: PdlMap {
    fn target(&self) -> &DVector<f64>;

    /// `m(x) - target` under the smooth extension.
    fn residual(&self, x: &DVector<f64>) -> DVector<f64>;

    /// Jacobian of the smooth extension at `x`.
    fn constraint_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// `sum_i mu_i * Hess m_i(x)`, or `None` when the extension is affine.
    fn curvature(&self, _x: &DVector<f64>, _mu: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    fn in_region(&self, _x: &DVector<f64>) -> bool {
        true
    }

    /// Closed-form Euclidean projection onto the affine constraint set with its multipliers.
    fn affine_projection(&self, _y0: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        None
    }
}

/// An estimator expressed in a k-dimensional chart of parameter space.
pub trait ChartEstimator: Send + Sync {
    fn data_dim(&self) -> usize;

    fn chart_dim(&self) -> usize;

    /// Estimate at `x` in chart coordinates, or `None` when `x` maps outside the chart.
    fn chart_estimate(&self, x: &DVector<f64>) -> Option<DVector<f64>>;
}
