//! Stochastic complexity of a fitted Lasso active set and the information criteria beside it.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::density::affine_density_parts;
use super::quadrature::integrate_box;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{gen_toeplitz_data, AffineConstraint, Dataset, EstimatorResult, LassoChart, LassoOptions, LevelSet, LikelihoodSpec, LinearGaussian};

/// Which part of the data space the complexity integrates over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComplexityMode {
    /// The affine extension of the fitted piece, without the sign and inactive-set constraints.
    ActiveChart,
    /// Only data whose Lasso fit keeps the fitted active set and signs.
    SignRegion,
}

/// Parameter region of the outer integral.
#[derive(Debug, Clone)]
pub enum OuterRegion {
    /// `theta_hat +/- w sigma sqrt(diag((X_S^T X_S)^{-1}))`.
    PosteriorBox { half_width_sd: f64 },
    /// A fixed box in active-set coordinates.
    Fixed { lo: DVector<f64>, hi: DVector<f64> },
}

impl OuterRegion {
    pub fn bounds(&self, center: &DVector<f64>, sigma: f64, gram: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let k = center.len();
        match self {
            Self::PosteriorBox { half_width_sd } => {
                let inv = gram.clone().cholesky().ok_or_else(|| Error::Singular("active Gram matrix".into()))?.inverse();
                let half = DVector::from_fn(k, |j, _| half_width_sd * sigma * inv[(j, j)].sqrt());
                Ok((center - &half, center + &half))
            }
            Self::Fixed { lo, hi } => {
                if lo.len() != k || hi.len() != k || lo.iter().zip(hi.iter()).any(|(a, b)| !(a < b)) {
                    return Err(Error::Input(format!("fixed box must have {k} coordinates with lo < hi")));
                }
                Ok((lo.clone(), hi.clone()))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ComplexityConfig {
    pub mode: ComplexityMode,
    pub region: OuterRegion,
    /// Gauss-Legendre nodes per axis.
    pub gl_order: usize,
    /// Largest dimension integrated by the tensor rule; above it, uniform Monte Carlo.
    pub max_tensor_dim: usize,
    pub mc_points: usize,
    /// Conditional draws per node for the region mass (`SignRegion` only).
    pub region_draws: usize,
    pub lasso: LassoOptions,
    pub seed: u64,
}

impl Default for ComplexityConfig {
    fn default() -> Self {
        Self {
            mode: ComplexityMode::ActiveChart,
            region: OuterRegion::PosteriorBox { half_width_sd: 6.0 },
            gl_order: 8,
            max_tensor_dim: 3,
            mc_points: 4096,
            region_draws: 400,
            lasso: LassoOptions::default(),
            seed: 0,
        }
    }
}

/// Log complexity of one active set with its standard error and the log volume of the box.
#[derive(Debug, Clone, Copy)]
pub struct OuterIntegral {
    pub log_complexity: f64,
    pub se: f64,
    pub log_volume: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityRecord {
    pub lambda: f64,
    pub k: usize,
    pub log_complexity: f64,
    pub log_complexity_se: f64,
    /// `-ln p(y | theta_hat)`.
    pub nll_fit: f64,
    pub codelength: f64,
    pub bic: f64,
    pub aic: f64,
    pub asymptotic_nml: f64,
    /// `ln int_box sqrt(det I_1)` with per-observation Fisher information `I_1`.
    pub fisher_log_volume: f64,
}

/// Gaussian negative log-likelihood with known `sigma`.
pub fn gaussian_nll(rss: f64, n: usize, sigma: f64) -> f64 {
    0.5 * n as f64 * (2.0 * PI * sigma * sigma).ln() + rss / (2.0 * sigma * sigma)
}

/// `ln f(theta')` on the level set `{G x = c}` with likelihood mean `design theta'`.
fn log_nml_integrand<L, R>(level: &L, design: &DMatrix<f64>, theta: &DVector<f64>, sigma: f64, draws: usize, rng: &mut R) -> Result<(f64, f64)>
where
    L: LevelSet + ?Sized,
    R: Rng + ?Sized,
{
    let spec = LikelihoodSpec::gaussian_regression(design.clone(), theta.clone(), sigma);
    let parts = affine_density_parts(level, &spec, draws, rng)?;
    Ok((parts.log_untruncated + parts.region_mass.ln(), parts.log_untruncated + parts.region_mass_se.ln()))
}

/// Complexity of a Lasso active set: `ln int_box f(theta') dtheta'` with the likelihood
/// evaluated at `theta'` itself.
///
/// On the affine chart the integrand `f(theta') = N(shift; 0, sigma^2 G G^T)` does not depend
/// on `theta'`, so the integral is the box volume times one evaluation.
pub fn log_complexity_chart<R: Rng + ?Sized>(
    chart: &Arc<LassoChart>,
    center: &DVector<f64>,
    sigma: f64,
    cfg: &ComplexityConfig,
    rng: &mut R,
) -> Result<OuterIntegral> {
    let (lo, hi) = cfg.region.bounds(center, sigma, chart.gram())?;
    let design = chart.active_design().clone();
    match cfg.mode {
        ComplexityMode::ActiveChart => {
            let log_volume: f64 = lo.iter().zip(hi.iter()).map(|(a, b)| (b - a).ln()).sum();
            let level = AffineConstraint::new(chart.jacobian().clone(), center + chart.shift())?;
            let (lf, _) = log_nml_integrand(&level, &design, center, sigma, 0, rng)?;
            Ok(OuterIntegral { log_complexity: log_volume + lf, se: 0.0, log_volume })
        }
        ComplexityMode::SignRegion => {
            let draws = cfg.region_draws;
            let res = integrate_box(&lo, &hi, cfg.gl_order, cfg.max_tensor_dim, cfg.mc_points, rng, |theta| {
                if theta.iter().zip(chart.signs().iter()).any(|(t, s)| t * s <= 0.0) {
                    return Ok((f64::NEG_INFINITY, f64::NEG_INFINITY));
                }
                let level = chart.level_set(theta.clone())?;
                let mut node_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ theta.iter().fold(0u64, |h, v| h.rotate_left(7) ^ v.to_bits()));
                log_nml_integrand(&level, &design, theta, sigma, draws, &mut node_rng)
            })?;
            Ok(OuterIntegral { log_complexity: res.log_value, se: res.rel_se, log_volume: res.log_volume })
        }
    }
}

/// Complexity of a least-squares family over `[lo, hi]` by quadrature of the level-set density.
pub fn log_complexity_linear<R: Rng + ?Sized>(
    model: &LinearGaussian,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    sigma: f64,
    cfg: &ComplexityConfig,
    rng: &mut R,
) -> Result<OuterIntegral> {
    let res = integrate_box(lo, hi, cfg.gl_order, cfg.max_tensor_dim, cfg.mc_points, rng, |theta| {
        let level = model.level_set(theta.clone())?;
        let mut no_rng = ChaCha8Rng::seed_from_u64(0);
        log_nml_integrand(&level, model.design(), theta, sigma, 0, &mut no_rng)
    })?;
    Ok(OuterIntegral { log_complexity: res.log_value, se: res.rel_se, log_volume: res.log_volume })
}

fn lambda_seed(seed: u64, lambda: f64) -> u64 {
    seed ^ lambda.to_bits().rotate_left(17)
}

/// Complexity record for an existing fit on `data`.
pub fn complexity_record(data: &Dataset, fit: &EstimatorResult, cfg: &ComplexityConfig) -> Result<ComplexityRecord> {
    let n = data.n();
    let sigma = data.meta.noise_sd;
    let rss = (&data.y - data.x.as_ref() * &fit.beta).norm_squared();
    let nll_fit = gaussian_nll(rss, n, sigma);
    let k = fit.k();
    let ln_n = (n as f64).ln();
    if k == 0 {
        return Ok(ComplexityRecord {
            lambda: fit.lambda,
            k,
            log_complexity: 0.0,
            log_complexity_se: 0.0,
            nll_fit,
            codelength: nll_fit,
            bic: nll_fit,
            aic: nll_fit,
            asymptotic_nml: nll_fit,
            fisher_log_volume: 0.0,
        });
    }
    if k >= n {
        return Err(Error::Complexity(format!("active set of size {k} leaves no level-set dimension at N = {n}")));
    }
    let chart = Arc::new(LassoChart::from_fit(Arc::clone(&data.x), fit, cfg.lasso)?);
    let mut rng = ChaCha8Rng::seed_from_u64(lambda_seed(cfg.seed, fit.lambda));
    let outer = log_complexity_chart(&chart, &fit.theta_hat, sigma, cfg, &mut rng)?;
    if !outer.log_complexity.is_finite() || !outer.se.is_finite() {
        return Err(Error::Complexity(format!(
            "non-finite outer integral at lambda = {}: ln C = {}, se = {}, ln vol = {}",
            fit.lambda, outer.log_complexity, outer.se, outer.log_volume
        )));
    }
    let log_det_gram = linalg::log_det_spd(chart.gram()).ok_or_else(|| Error::Singular("active Gram matrix".into()))?;
    let kf = k as f64;
    let fisher_log_volume = outer.log_volume + 0.5 * log_det_gram - 0.5 * kf * (n as f64 * sigma * sigma).ln();
    Ok(ComplexityRecord {
        lambda: fit.lambda,
        k,
        log_complexity: outer.log_complexity,
        log_complexity_se: outer.se,
        nll_fit,
        codelength: nll_fit + outer.log_complexity,
        bic: nll_fit + 0.5 * kf * ln_n,
        aic: nll_fit + kf,
        asymptotic_nml: nll_fit + 0.5 * kf * (n as f64 / (2.0 * PI)).ln() + fisher_log_volume,
        fisher_log_volume,
    })
}

/// Fits the Lasso at `lambda` and returns its complexity record.
pub fn stochastic_complexity_local(data: &Dataset, lambda: f64, cfg: &ComplexityConfig) -> Result<ComplexityRecord> {
    let fit = crate::model::lasso_fit(&data.x, &data.y, lambda, &cfg.lasso)?;
    complexity_record(data, &fit, cfg)
}

/// Least-squares fit of `ln C` against `ln N` at a fixed active dimension.
#[derive(Debug, Clone)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub k: usize,
    /// `(N, ln C - (k/2) ln N)` per input.
    pub residuals: Vec<(usize, f64)>,
}

/// Fits `ln C = a + b ln N` to `(N, k, ln C)` triples sharing one `k` and at least three sizes.
pub fn asymptotic_slope_check(records: &[(usize, usize, f64)]) -> Result<SlopeFit> {
    let Some(&(_, k, _)) = records.first() else {
        return Err(Error::Input("no records".into()));
    };
    if records.iter().any(|r| r.1 != k) {
        return Err(Error::Input("records mix active dimensions".into()));
    }
    let mut sizes: Vec<usize> = records.iter().map(|r| r.0).collect();
    sizes.sort_unstable();
    sizes.dedup();
    if sizes.len() < 3 {
        return Err(Error::Input(format!("need at least 3 sample sizes, got {}", sizes.len())));
    }
    let xs: Vec<f64> = records.iter().map(|r| (r.0 as f64).ln()).collect();
    let ys: Vec<f64> = records.iter().map(|r| r.2).collect();
    let (slope, intercept, _) = weighted_line(&xs, &ys, &vec![1.0; xs.len()]);
    let residuals = records.iter().map(|r| (r.0, r.2 - 0.5 * k as f64 * (r.0 as f64).ln())).collect();
    Ok(SlopeFit { slope, intercept, k, residuals })
}

/// Weighted least-squares line; returns slope, intercept and the slope's standard error
/// when the weights are inverse variances.
pub fn weighted_line(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64, f64) {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(w).map(|(a, b)| b * (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).zip(w).map(|((a, c), b)| b * (a - mx) * (c - my)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx, (1.0 / sxx).sqrt())
}

/// Settings of the complexity-versus-sample-size study on the true support.
#[derive(Debug, Clone)]
pub struct SlopeStudyConfig {
    pub ns: Vec<usize>,
    pub p: usize,
    pub rho: f64,
    pub snr: f64,
    pub beta_star: Vec<f64>,
    pub replicates: usize,
    /// `lambda = lambda_factor * noise_sd` for each dataset.
    pub lambda_factor: f64,
    /// Half-width of the fixed box around the true active coefficients.
    pub box_half_width: f64,
    pub seed: u64,
}

impl Default for SlopeStudyConfig {
    fn default() -> Self {
        Self {
            ns: vec![50, 100, 200, 400],
            p: 10,
            rho: 0.5,
            snr: 3.0,
            beta_star: vec![2.0, -1.5],
            replicates: 20,
            lambda_factor: 1.0,
            box_half_width: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SlopeStudyRow {
    pub n: usize,
    pub k: usize,
    pub mean_log_complexity: f64,
    pub se_log_complexity: f64,
    /// `mean ln C - (k/2) ln N`.
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct SlopeStudy {
    pub rows: Vec<SlopeStudyRow>,
    pub fit: SlopeFit,
    /// Inverse-variance weighted slope of the mean `ln C` on `ln N` and its standard error.
    pub weighted_slope: f64,
    pub weighted_slope_se: f64,
}

impl SlopeStudy {
    /// Writes `n,k,mean_log_complexity,se_log_complexity,residual`.
    pub fn write_rows_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["n", "k", "mean_log_complexity", "se_log_complexity", "residual"])?;
        for r in &self.rows {
            w.write_record([r.n.to_string(), r.k.to_string(), format!("{}", r.mean_log_complexity), format!("{}", r.se_log_complexity), format!("{}", r.residual)])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `k,slope,intercept,weighted_slope,weighted_slope_se`.
    pub fn write_fit_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["k", "slope", "intercept", "weighted_slope", "weighted_slope_se"])?;
        let f = &self.fit;
        w.write_record([f.k.to_string(), format!("{}", f.slope), format!("{}", f.intercept), format!("{}", self.weighted_slope), format!("{}", self.weighted_slope_se)])?;
        w.flush()?;
        Ok(())
    }
}

/// Complexity on the true support over replicate datasets per sample size, with a fixed box and
/// `lambda` proportional to the noise level.
pub fn slope_study(cfg: &SlopeStudyConfig) -> Result<SlopeStudy> {
    if cfg.replicates < 2 {
        return Err(Error::Input("the slope study needs at least 2 replicates per size".into()));
    }
    let support: Vec<usize> = cfg.beta_star.iter().enumerate().filter(|(_, b)| **b != 0.0).map(|(j, _)| j).collect();
    let signs: Vec<f64> = support.iter().map(|&j| cfg.beta_star[j].signum()).collect();
    let k = support.len();
    let truth = DVector::from_iterator(k, support.iter().map(|&j| cfg.beta_star[j]));
    let region = OuterRegion::Fixed {
        lo: truth.add_scalar(-cfg.box_half_width),
        hi: truth.add_scalar(cfg.box_half_width),
    };
    let ccfg = ComplexityConfig { region, ..ComplexityConfig::default() };
    let mut rows = Vec::new();
    let mut triples = Vec::new();
    for (i, &n) in cfg.ns.iter().enumerate() {
        let values: Vec<f64> = (0..cfg.replicates)
            .into_par_iter()
            .map(|r| {
                let seed = cfg.seed.wrapping_add((i as u64) << 32).wrapping_add(r as u64);
                let data = gen_toeplitz_data(n, cfg.p, cfg.rho, cfg.snr, &cfg.beta_star, seed)?;
                let sigma = data.meta.noise_sd;
                let chart = Arc::new(LassoChart::new(Arc::clone(&data.x), cfg.lambda_factor * sigma, support.clone(), signs.clone(), LassoOptions::default())?);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok(log_complexity_chart(&chart, &truth, sigma, &ccfg, &mut rng)?.log_complexity)
            })
            .collect::<Result<_>>()?;
        let m = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64;
        let se = (var / values.len() as f64).sqrt();
        for v in &values {
            triples.push((n, k, *v));
        }
        rows.push(SlopeStudyRow { n, k, mean_log_complexity: m, se_log_complexity: se, residual: m - 0.5 * k as f64 * (n as f64).ln() });
    }
    let fit = asymptotic_slope_check(&triples)?;
    let x: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.mean_log_complexity).collect();
    let w: Vec<f64> = rows.iter().map(|r| 1.0 / r.se_log_complexity.max(1e-12).powi(2)).collect();
    let (weighted_slope, _, weighted_slope_se) = weighted_line(&x, &y, &w);
    Ok(SlopeStudy { rows, fit, weighted_slope, weighted_slope_se })
}
