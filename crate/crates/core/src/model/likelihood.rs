use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub enum LikelihoodKind {
    /// `x_i ~ N(theta0[0], sigma^2)` independently.
    GaussianScalar,
    /// `x ~ N(design theta0, sigma^2 I)`.
    GaussianRegression { design: DMatrix<f64> },
}

/// Isotropic Gaussian data model `p(x | theta0)` with known `sigma`.
#[derive(Debug, Clone)]
pub struct LikelihoodSpec {
    pub kind: LikelihoodKind,
    pub theta0: DVector<f64>,
    pub sigma: f64,
}

impl LikelihoodSpec {
    pub fn gaussian_scalar(theta0: f64, sigma: f64) -> Self {
        Self { kind: LikelihoodKind::GaussianScalar, theta0: DVector::from_element(1, theta0), sigma }
    }

    pub fn gaussian_regression(design: DMatrix<f64>, theta0: DVector<f64>, sigma: f64) -> Self {
        Self { kind: LikelihoodKind::GaussianRegression { design }, theta0, sigma }
    }

    /// Same model at a different parameter.
    pub fn at(&self, theta0: DVector<f64>) -> Self {
        Self { kind: self.kind.clone(), theta0, sigma: self.sigma }
    }

    pub fn mean(&self, n: usize) -> Result<DVector<f64>> {
        match &self.kind {
            LikelihoodKind::GaussianScalar => Ok(DVector::from_element(n, self.theta0[0])),
            LikelihoodKind::GaussianRegression { design } => {
                if design.nrows() != n || design.ncols() != self.theta0.len() {
                    return Err(Error::Input(format!(
                        "design {:?} does not match data length {n} and parameter length {}",
                        design.shape(),
                        self.theta0.len()
                    )));
                }
                Ok(design * &self.theta0)
            }
        }
    }

    /// `-n/2 log(2 pi sigma^2)`.
    pub fn log_normalizer(&self, n: usize) -> f64 {
        -0.5 * n as f64 * (2.0 * PI * self.sigma * self.sigma).ln()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        if !(self.sigma > 0.0) {
            return Err(Error::Input(format!("sigma must be positive, got {}", self.sigma)));
        }
        let mean = self.mean(x.len())?;
        let rss = (x - mean).norm_squared();
        Ok(self.log_normalizer(x.len()) - rss / (2.0 * self.sigma * self.sigma))
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<DVector<f64>> {
        let mean = self.mean(n)?;
        Ok(mean.map(|m| {
            let z: f64 = StandardNormal.sample(rng);
            m + self.sigma * z
        }))
    }
}

/// Full Gaussian log-density, normalizing constant included.
pub fn log_likelihood(spec: &LikelihoodSpec, x: &DVector<f64>) -> Result<f64> {
    spec.log_density(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_density_at_mean_is_the_normalizer() {
        let spec = LikelihoodSpec::gaussian_scalar(1.5, 2.0);
        let x = DVector::from_element(3, 1.5);
        let v = log_likelihood(&spec, &x).unwrap();
        assert!((v + 1.5 * (8.0 * PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn mismatched_design_is_rejected() {
        let spec = LikelihoodSpec::gaussian_regression(DMatrix::zeros(4, 2), DVector::zeros(2), 1.0);
        assert!(log_likelihood(&spec, &DVector::zeros(3)).is_err());
    }
}
