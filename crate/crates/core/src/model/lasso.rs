use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, Mutex, PoisonError};

use nalgebra::{DMatrix, DVector};

use super::{ChartEstimator, LevelSet, PdlMap, PieceLabel};
use super::{ConservativeJacobian, JacobianSource};
use crate::error::{Error, Result};

/// Coordinate-descent settings for the Lasso `min 0.5 ||y - X b||^2 + lambda ||b||_1`.
#[derive(Debug, Clone, Copy)]
pub struct LassoOptions {
    /// Stop once the KKT residual is at most this value.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Coefficients below this magnitude are numerical zeros.
    pub zero_tol: f64,
    /// Largest admissible condition number of `X_S^T X_S`.
    pub cond_cap: f64,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_sweeps: 100_000, zero_tol: 1e-12, cond_cap: 1e12 }
    }
}

/// Lasso fit at a single `lambda`.
#[derive(Debug, Clone)]
pub struct EstimatorResult {
    /// Coefficients on the active set, in `active_set` order.
    pub theta_hat: DVector<f64>,
    pub active_set: Vec<usize>,
    pub signs: Vec<f64>,
    pub lambda: f64,
    pub kkt_residual: f64,
    /// Full coefficient vector of length P.
    pub beta: DVector<f64>,
}

impl EstimatorResult {
    pub fn k(&self) -> usize {
        self.active_set.len()
    }
}

/// Smallest `lambda` with an all-zero solution: `max_j |X_j^T y|`.
pub fn lambda_max(x: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    x.tr_mul(y).amax()
}

/// Lasso objective `0.5 ||y - X b||^2 + lambda ||b||_1`.
pub fn lasso_objective(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>, lambda: f64) -> f64 {
    0.5 * (y - x * beta).norm_squared() + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
}

fn kkt_residual(corr: &DVector<f64>, beta: &DVector<f64>, lambda: f64, zero_tol: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..beta.len() {
        let v = if beta[j].abs() > zero_tol {
            (corr[j] - lambda * beta[j].signum()).abs()
        } else {
            (corr[j].abs() - lambda).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

/// Solves the active-set stationarity equations exactly; `None` if signs are not preserved.
fn polish(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64, beta: &DVector<f64>, zero_tol: f64) -> Option<DVector<f64>> {
    let support: Vec<usize> = (0..beta.len()).filter(|&j| beta[j].abs() > zero_tol).collect();
    if support.is_empty() {
        return Some(DVector::zeros(beta.len()));
    }
    let xs = x.select_columns(&support);
    let s = DVector::from_iterator(support.len(), support.iter().map(|&j| beta[j].signum()));
    let chol = xs.tr_mul(&xs).cholesky()?;
    let theta = chol.solve(&(xs.tr_mul(y) - lambda * &s));
    if theta.iter().zip(s.iter()).any(|(t, sg)| t * sg <= 0.0) {
        return None;
    }
    let mut out = DVector::zeros(beta.len());
    for (i, &j) in support.iter().enumerate() {
        out[j] = theta[i];
    }
    Some(out)
}

/// Cyclic coordinate descent from zero.
pub fn lasso_fit(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64, opts: &LassoOptions) -> Result<EstimatorResult> {
    lasso_fit_warm(x, y, lambda, opts, None)
}

/// Cyclic coordinate descent from `warm` (length P), followed by an exact active-set solve.
pub fn lasso_fit_warm(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda: f64,
    opts: &LassoOptions,
    warm: Option<&DVector<f64>>,
) -> Result<EstimatorResult> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::Input(format!("response has length {} but design has {n} rows", y.len())));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Input(format!("lambda must be positive and finite, got {lambda}")));
    }
    let col_sq: Vec<f64> = (0..p).map(|j| x.column(j).norm_squared()).collect();
    let mut beta = match warm {
        Some(w) if w.len() == p => w.clone(),
        Some(w) => return Err(Error::Input(format!("warm start has length {} but p = {p}", w.len()))),
        None => DVector::zeros(p),
    };
    let mut r = y - x * &beta;

    let update = |j: usize, beta: &mut DVector<f64>, r: &mut DVector<f64>| -> f64 {
        if col_sq[j] == 0.0 {
            return 0.0;
        }
        let old = beta[j];
        let z = x.column(j).dot(r) + col_sq[j] * old;
        let new = super::soft_threshold(z, lambda) / col_sq[j];
        let delta = new - old;
        if delta != 0.0 {
            r.axpy(-delta, &x.column(j), 1.0);
            beta[j] = new;
        }
        delta.abs() * col_sq[j].sqrt()
    };

    let mut residual = f64::INFINITY;
    let mut sweeps = 0;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        for j in 0..p {
            update(j, &mut beta, &mut r);
        }
        let active: Vec<usize> = (0..p).filter(|&j| beta[j] != 0.0).collect();
        for _ in 0..1000 {
            let mut max_step: f64 = 0.0;
            for &j in &active {
                max_step = max_step.max(update(j, &mut beta, &mut r));
            }
            if max_step < 1e-3 * opts.tol {
                break;
            }
        }
        r = y - x * &beta;
        residual = kkt_residual(&x.tr_mul(&r), &beta, lambda, opts.zero_tol);
        if residual <= opts.tol {
            break;
        }
    }
    if let Some(polished) = polish(x, y, lambda, &beta, opts.zero_tol) {
        let pres = kkt_residual(&x.tr_mul(&(y - x * &polished)), &polished, lambda, opts.zero_tol);
        if pres <= residual.max(opts.tol) {
            beta = polished;
            residual = pres;
        }
    }
    if residual > opts.tol {
        return Err(Error::Solver { iterations: sweeps, best_residual: residual });
    }
    let active_set: Vec<usize> = (0..p).filter(|&j| beta[j].abs() > opts.zero_tol).collect();
    for j in 0..p {
        if beta[j].abs() <= opts.zero_tol {
            beta[j] = 0.0;
        }
    }
    let signs: Vec<f64> = active_set.iter().map(|&j| beta[j].signum()).collect();
    let theta_hat = DVector::from_iterator(active_set.len(), active_set.iter().map(|&j| beta[j]));
    Ok(EstimatorResult { theta_hat, active_set, signs, lambda, kkt_residual: residual, beta })
}

/// Jacobian `(X_S^T X_S)^{-1} X_S^T` of the active coefficients with respect to `y`.
pub fn lasso_jacobian(x: &DMatrix<f64>, fit: &EstimatorResult, opts: &LassoOptions) -> Result<ConservativeJacobian> {
    if fit.k() == 0 {
        return Ok(ConservativeJacobian::new(DMatrix::zeros(0, x.nrows()), JacobianSource::Frechet));
    }
    let xs = x.select_columns(&fit.active_set);
    let gram = xs.tr_mul(&xs);
    check_gram(&gram, opts.cond_cap)?;
    let chol = gram.cholesky().ok_or_else(|| Error::Singular("active Gram matrix is not positive definite".into()))?;
    Ok(ConservativeJacobian::new(chol.solve(&xs.transpose()), JacobianSource::Frechet))
}

fn check_gram(gram: &DMatrix<f64>, cond_cap: f64) -> Result<()> {
    let eig = gram.clone().symmetric_eigen().eigenvalues;
    let hi = eig.max();
    let lo = eig.min();
    if !(lo > 0.0) || hi / lo > cond_cap {
        return Err(Error::Singular(format!("active Gram condition number {:.3e} exceeds cap {cond_cap:.1e}", hi / lo)));
    }
    Ok(())
}

fn piece_label(support: &[usize], signs: &[f64]) -> PieceLabel {
    let mut h = DefaultHasher::new();
    support.hash(&mut h);
    for s in signs {
        (*s > 0.0).hash(&mut h);
    }
    h.finish()
}

/// Last exact inactive margin `(y0, margin(y0))`. On a piece the inactive correlations move as
/// `X_j^T (I - X_S G) (y - y0)`, so `|margin(y) - margin(y0)| <= max_j |X_j| |y - y0|`.
#[derive(Debug, Default)]
struct MarginCache(Mutex<Option<(DVector<f64>, f64)>>);

impl Clone for MarginCache {
    fn clone(&self) -> Self {
        Self::default()
    }
}

/// The affine piece of the Lasso map on a fixed active set and sign pattern.
///
/// On this piece `theta_S(y) = G y - lambda (X_S^T X_S)^{-1} s` with `G = (X_S^T X_S)^{-1} X_S^T`,
/// valid while the signs agree with `s` and every inactive correlation stays within `lambda`.
#[derive(Debug, Clone)]
pub struct LassoChart {
    x: Arc<DMatrix<f64>>,
    lambda: f64,
    support: Vec<usize>,
    signs: DVector<f64>,
    inactive: Vec<usize>,
    xs: DMatrix<f64>,
    gram: DMatrix<f64>,
    g: DMatrix<f64>,
    shift: DVector<f64>,
    g_row_norms: Vec<f64>,
    max_inactive_norm: f64,
    label: PieceLabel,
    opts: LassoOptions,
    margin_cache: MarginCache,
}

impl LassoChart {
    pub fn new(x: Arc<DMatrix<f64>>, lambda: f64, support: Vec<usize>, signs: Vec<f64>, opts: LassoOptions) -> Result<Self> {
        let p = x.ncols();
        if support.is_empty() {
            return Err(Error::Input("a Lasso chart needs a nonempty active set".into()));
        }
        if support.len() != signs.len() || support.iter().any(|&j| j >= p) {
            return Err(Error::Input("active set and signs are inconsistent with the design".into()));
        }
        let xs = x.select_columns(&support);
        let gram = xs.tr_mul(&xs);
        check_gram(&gram, opts.cond_cap)?;
        let chol = gram.clone().cholesky().ok_or_else(|| Error::Singular("active Gram matrix is not positive definite".into()))?;
        let g = chol.solve(&xs.transpose());
        let s = DVector::from_column_slice(&signs);
        let shift = lambda * chol.solve(&s);
        let g_row_norms = (0..g.nrows()).map(|i| g.row(i).norm()).collect();
        let inactive: Vec<usize> = (0..p).filter(|j| !support.contains(j)).collect();
        let max_inactive_norm = inactive.iter().map(|&j| x.column(j).norm()).fold(0.0, f64::max);
        let label = piece_label(&support, &signs);
        Ok(Self {
            x,
            lambda,
            support,
            signs: s,
            inactive,
            xs,
            gram,
            g,
            shift,
            g_row_norms,
            max_inactive_norm,
            label,
            opts,
            margin_cache: MarginCache::default(),
        })
    }

    pub fn from_fit(x: Arc<DMatrix<f64>>, fit: &EstimatorResult, opts: LassoOptions) -> Result<Self> {
        Self::new(x, fit.lambda, fit.active_set.clone(), fit.signs.clone(), opts)
    }

    pub fn k(&self) -> usize {
        self.support.len()
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn signs(&self) -> &DVector<f64> {
        &self.signs
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn active_design(&self) -> &DMatrix<f64> {
        &self.xs
    }

    /// `X_S^T X_S`.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// The constant Jacobian `G` of the piece (k x N).
    pub fn jacobian(&self) -> &DMatrix<f64> {
        &self.g
    }

    /// `lambda (X_S^T X_S)^{-1} s`, the shrinkage offset of the piece.
    pub fn shift(&self) -> &DVector<f64> {
        &self.shift
    }

    pub fn label(&self) -> PieceLabel {
        self.label
    }

    pub fn piece_map(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.g * y - &self.shift
    }

    /// Correlations `X_j^T (y - X_S theta)` of the inactive columns, with `theta` on the level set.
    pub fn inactive_correlations(&self, y: &DVector<f64>, theta: &DVector<f64>) -> Vec<f64> {
        let r = y - &self.xs * theta;
        let corr = self.x.tr_mul(&r);
        self.inactive.iter().map(|&j| corr[j]).collect()
    }

    /// `lambda - max_j |X_j^T (y - X_S theta_S(y))|` over inactive columns; positive in the interior.
    pub fn inactive_margin(&self, y: &DVector<f64>) -> f64 {
        let theta = self.piece_map(y);
        let worst = self.inactive_correlations(y, &theta).iter().fold(0.0_f64, |m, c| m.max(c.abs()));
        self.lambda - worst
    }

    /// Whether `inactive_margin(y) > threshold`. Skips the O(NP) pass when the Lipschitz bound
    /// around the last exact evaluation decides.
    fn inactive_margin_exceeds(&self, y: &DVector<f64>, threshold: f64) -> bool {
        let mut cache = self.margin_cache.0.lock().unwrap_or_else(PoisonError::into_inner);
        if let Some((y0, m0)) = cache.as_ref() {
            let slack = self.max_inactive_norm * (y - y0).norm();
            if m0 - slack > threshold {
                return true;
            }
            if m0 + slack <= threshold {
                return false;
            }
        }
        let m = self.inactive_margin(y);
        *cache = Some((y.clone(), m));
        m > threshold
    }

    /// Smallest signed coefficient margin `min_j s_j theta_j(y)`.
    pub fn sign_margin(&self, y: &DVector<f64>) -> f64 {
        let theta = self.piece_map(y);
        theta.iter().zip(self.signs.iter()).map(|(t, s)| t * s).fold(f64::INFINITY, f64::min)
    }

    /// Whether the Lasso solution at `y` has this active set and sign pattern, up to `tol`.
    pub fn contains(&self, y: &DVector<f64>, tol: f64) -> bool {
        self.sign_margin(y) > 0.0 && self.inactive_margin_exceeds(y, -tol)
    }

    pub fn level_set(self: &Arc<Self>, theta_prime: DVector<f64>) -> Result<LassoLevelSet> {
        if theta_prime.len() != self.k() {
            return Err(Error::Input(format!("level has length {} but the active set has {}", theta_prime.len(), self.k())));
        }
        if theta_prime.iter().zip(self.signs.iter()).any(|(t, s)| t * s <= 0.0) {
            return Err(Error::Input("level coordinates must carry the chart's sign pattern".into()));
        }
        Ok(LassoLevelSet { chart: Arc::clone(self), theta_prime })
    }

    fn refit_jacobian(&self, y: &DVector<f64>) -> Result<(DMatrix<f64>, PieceLabel)> {
        let fit = lasso_fit(&self.x, y, self.lambda, &self.opts)?;
        let mut out = DMatrix::zeros(self.k(), self.n());
        if fit.k() > 0 {
            let full = lasso_jacobian(&self.x, &fit, &self.opts)?;
            for (row, j) in self.support.iter().enumerate() {
                if let Some(pos) = fit.active_set.iter().position(|a| a == j) {
                    out.set_row(row, &full.matrix.row(pos));
                }
            }
        }
        Ok((out, piece_label(&fit.active_set, &fit.signs)))
    }
}

impl PdlMap for LassoChart {
    fn input_dim(&self) -> usize {
        self.n()
    }

    fn output_dim(&self) -> usize {
        self.k()
    }

    fn piece_jacobian(&self, y: &DVector<f64>) -> Result<(DMatrix<f64>, PieceLabel)> {
        if self.sign_margin(y) > 0.0 && self.inactive_margin_exceeds(y, 0.0) {
            return Ok((self.g.clone(), self.label));
        }
        self.refit_jacobian(y)
    }

    fn piece_jacobians_near(
        &self,
        center: &DVector<f64>,
        radius: f64,
        points: &[DVector<f64>],
    ) -> Result<Vec<(DMatrix<f64>, PieceLabel)>> {
        // Coefficients move by at most |G_j| r and residual correlations by at most |X_j| r.
        let theta = self.piece_map(center);
        let sign_ok = (0..self.k()).all(|j| theta[j] * self.signs[j] > self.g_row_norms[j] * radius);
        if sign_ok && self.inactive_margin_exceeds(center, self.max_inactive_norm * radius) {
            return Ok(points.iter().map(|_| (self.g.clone(), self.label)).collect());
        }
        points.iter().map(|p| self.piece_jacobian(p)).collect()
    }
}

impl ChartEstimator for LassoChart {
    fn data_dim(&self) -> usize {
        self.n()
    }

    fn chart_dim(&self) -> usize {
        self.k()
    }

    /// Refits by coordinate descent and keeps the fit only if it lands on this active set and signs.
    fn chart_estimate(&self, y: &DVector<f64>) -> Option<DVector<f64>> {
        let fit = lasso_fit(&self.x, y, self.lambda, &self.opts).ok()?;
        let same = fit.active_set == self.support
            && fit.signs.iter().zip(self.signs.iter()).all(|(a, b)| a == b);
        same.then_some(fit.theta_hat)
    }
}

/// Level set `{y : theta_hat(y) = theta'}` of the Lasso on a fixed active set and sign pattern.
#[derive(Debug, Clone)]
pub struct LassoLevelSet {
    chart: Arc<LassoChart>,
    theta_prime: DVector<f64>,
}

impl LassoLevelSet {
    pub fn chart(&self) -> &LassoChart {
        &self.chart
    }

    /// Right-hand side `b = X_S^T X_S theta' + lambda s` of the affine constraint `X_S^T y = b`.
    pub fn affine_rhs(&self) -> DVector<f64> {
        &self.chart.gram * &self.theta_prime + self.chart.lambda * &self.chart.signs
    }
}

impl PdlMap for LassoLevelSet {
    fn input_dim(&self) -> usize {
        self.chart.n()
    }

    fn output_dim(&self) -> usize {
        self.chart.k()
    }

    fn piece_jacobian(&self, y: &DVector<f64>) -> Result<(DMatrix<f64>, PieceLabel)> {
        self.chart.piece_jacobian(y)
    }

    fn piece_jacobians_near(
        &self,
        center: &DVector<f64>,
        radius: f64,
        points: &[DVector<f64>],
    ) -> Result<Vec<(DMatrix<f64>, PieceLabel)>> {
        self.chart.piece_jacobians_near(center, radius, points)
    }
}

impl LevelSet for LassoLevelSet {
    fn target(&self) -> &DVector<f64> {
        &self.theta_prime
    }

    fn residual(&self, y: &DVector<f64>) -> DVector<f64> {
        self.chart.piece_map(y) - &self.theta_prime
    }

    fn constraint_jacobian(&self, _y: &DVector<f64>) -> DMatrix<f64> {
        self.chart.g.clone()
    }

    fn in_region(&self, y: &DVector<f64>) -> bool {
        self.chart.contains(y, 1e-10 * self.chart.lambda.max(1.0))
    }

    fn affine_projection(&self, y0: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        let c = &self.chart;
        let mu = c.xs.tr_mul(y0) - self.affine_rhs();
        let x = y0 - c.g.tr_mul(&mu);
        Some((x, mu))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gen_toeplitz_data;

    #[test]
    fn orthonormal_design_reduces_to_soft_thresholding() {
        let x = DMatrix::<f64>::identity(4, 4);
        let y = DVector::from_vec(vec![3.0, -0.5, -2.0, 0.9]);
        let fit = lasso_fit(&x, &y, 1.0, &LassoOptions::default()).unwrap();
        let expected = [2.0, 0.0, -1.0, 0.0];
        for j in 0..4 {
            assert!((fit.beta[j] - expected[j]).abs() < 1e-12);
        }
        assert_eq!(fit.active_set, vec![0, 2]);
        assert_eq!(fit.signs, vec![1.0, -1.0]);
    }

    #[test]
    fn lambda_above_max_gives_empty_support() {
        let d = gen_toeplitz_data(30, 10, 0.5, 3.0, &[1.0, -1.0], 2).unwrap();
        let lmax = lambda_max(&d.x, &d.y);
        let fit = lasso_fit(&d.x, &d.y, lmax * 1.01, &LassoOptions::default()).unwrap();
        assert_eq!(fit.k(), 0);
        let j = lasso_jacobian(&d.x, &fit, &LassoOptions::default()).unwrap();
        assert_eq!(j.matrix.shape(), (0, 30));
    }

    #[test]
    fn warm_and_cold_starts_agree() {
        let d = gen_toeplitz_data(40, 25, 0.5, 3.0, &[3.0, -2.0, 2.0], 11).unwrap();
        let opts = LassoOptions::default();
        let lam = 0.2 * lambda_max(&d.x, &d.y);
        let a = lasso_fit(&d.x, &d.y, lam, &opts).unwrap();
        let warm = DVector::from_element(25, 0.7);
        let b = lasso_fit_warm(&d.x, &d.y, lam, &opts, Some(&warm)).unwrap();
        assert!((a.beta - b.beta).amax() < 10.0 * opts.tol);
    }

    #[test]
    fn chart_piece_map_reproduces_the_fit() {
        let d = gen_toeplitz_data(30, 12, 0.5, 3.0, &[3.0, -2.0, 2.0], 3).unwrap();
        let opts = LassoOptions::default();
        let lam = 0.3 * lambda_max(&d.x, &d.y);
        let fit = lasso_fit(&d.x, &d.y, lam, &opts).unwrap();
        let chart = LassoChart::from_fit(Arc::clone(&d.x), &fit, opts).unwrap();
        assert!((chart.piece_map(&d.y) - &fit.theta_hat).amax() < 1e-10);
        assert!(chart.contains(&d.y, 1e-10));
        assert!(chart.inactive_margin(&d.y) > 0.0);
    }

    #[test]
    fn cached_margin_decisions_match_exact_margins() {
        let d = gen_toeplitz_data(15, 30, 0.5, 3.0, &[3.0, -2.0], 6).unwrap();
        let opts = LassoOptions::default();
        let fit = lasso_fit(&d.x, &d.y, 0.3 * lambda_max(&d.x, &d.y), &opts).unwrap();
        let chart = LassoChart::from_fit(Arc::clone(&d.x), &fit, opts).unwrap();
        let mut y = d.y.clone();
        for i in 0..400 {
            // Steps alternate between tiny moves, which the bound decides, and large jumps.
            let scale = if i % 5 == 0 { 0.5 } else { 1e-3 };
            y += DVector::from_fn(15, |r, _| scale * ((3 * i + 7 * r) as f64).sin());
            for thr in [-1e-10, 0.0, 0.01] {
                assert_eq!(chart.inactive_margin_exceeds(&y, thr), chart.inactive_margin(&y) > thr, "step {i}");
            }
        }
    }

    #[test]
    fn affine_projection_lands_on_the_level_set() {
        let d = gen_toeplitz_data(20, 8, 0.5, 3.0, &[3.0, -2.0], 5).unwrap();
        let opts = LassoOptions::default();
        let lam = 0.3 * lambda_max(&d.x, &d.y);
        let fit = lasso_fit(&d.x, &d.y, lam, &opts).unwrap();
        let chart = Arc::new(LassoChart::from_fit(Arc::clone(&d.x), &fit, opts).unwrap());
        let level = chart.level_set(fit.theta_hat.clone()).unwrap();
        let y0 = &d.y + DVector::from_fn(20, |i, _| 0.01 * ((i as f64).sin()));
        let (x, mu) = level.affine_projection(&y0).unwrap();
        assert!(level.residual(&x).amax() < 1e-12);
        let stat = &x - &y0 + level.constraint_jacobian(&x).tr_mul(&mu);
        assert!(stat.amax() < 1e-12);
    }
}
