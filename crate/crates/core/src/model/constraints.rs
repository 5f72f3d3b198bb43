use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{LevelSet, PdlMap, PieceLabel};
use crate::error::{Error, Result};

/// Affine level set `{x : A x = b}` with `A` of full row rank.
#[derive(Debug, Clone)]
pub struct AffineConstraint {
    a: DMatrix<f64>,
    b: DVector<f64>,
    aat: Cholesky<f64, Dyn>,
}

impl AffineConstraint {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(Error::Input(format!("A has {} rows but b has length {}", a.nrows(), b.len())));
        }
        let aat = (&a * a.transpose())
            .cholesky()
            .ok_or_else(|| Error::Singular("constraint matrix lacks full row rank".into()))?;
        Ok(Self { a, b, aat })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// Orthogonal projector `I - A^T (A A^T)^{-1} A` onto the tangent space.
    pub fn tangent_projector(&self) -> DMatrix<f64> {
        let n = self.a.ncols();
        DMatrix::identity(n, n) - self.a.transpose() * self.aat.solve(&self.a)
    }
}

impl PdlMap for AffineConstraint {
    fn input_dim(&self) -> usize {
        self.a.ncols()
    }

    fn output_dim(&self) -> usize {
        self.a.nrows()
    }

    fn piece_jacobian(&self, _x: &DVector<f64>) -> Result<(DMatrix<f64>, PieceLabel)> {
        Ok((self.a.clone(), 0))
    }
}

impl LevelSet for AffineConstraint {
    fn target(&self) -> &DVector<f64> {
        &self.b
    }

    fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x - &self.b
    }

    fn constraint_jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.a.clone()
    }

    fn affine_projection(&self, y0: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        let mu = self.aat.solve(&self.residual(y0));
        Some((y0 - self.a.tr_mul(&mu), mu))
    }
}

/// Sphere `{x : |x|^2 = r^2}`, a curved level set with constraint Hessian `2 I`.
#[derive(Debug, Clone)]
pub struct SphereConstraint {
    n: usize,
    target: DVector<f64>,
}

impl SphereConstraint {
    pub fn new(n: usize, radius: f64) -> Result<Self> {
        if n < 2 || !(radius > 0.0) {
            return Err(Error::Input(format!("need n >= 2 and radius > 0, got n = {n}, radius = {radius}")));
        }
        Ok(Self { n, target: DVector::from_element(1, radius * radius) })
    }

    pub fn radius(&self) -> f64 {
        self.target[0].sqrt()
    }
}

impl PdlMap for SphereConstraint {
    fn input_dim(&self) -> usize {
        self.n
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn piece_jacobian(&self, x: &DVector<f64>) -> Result<(DMatrix<f64>, PieceLabel)> {
        Ok((self.constraint_jacobian(x), 0))
    }
}

impl LevelSet for SphereConstraint {
    fn target(&self) -> &DVector<f64> {
        &self.target
    }

    fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, x.norm_squared() - self.target[0])
    }

    fn constraint_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(1, self.n, |_, j| 2.0 * x[j])
    }

    fn curvature(&self, _x: &DVector<f64>, mu: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::identity(self.n, self.n) * (2.0 * mu[0]))
    }
}
