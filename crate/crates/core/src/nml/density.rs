//! Estimators of the level-set density `f(theta') = int_{L} p(x | theta0) / J dH`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diagnostics::batch_means_se;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{ChartEstimator, LevelSet, LikelihoodSpec};
use crate::sampler::Chain;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityMethod {
    McmcBridge,
    AmbientIs,
    Thickened,
    AnalyticAffine,
}

impl std::fmt::Display for DensityMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::McmcBridge => "mcmc_bridge",
            Self::AmbientIs => "ambient_is",
            Self::Thickened => "thickened",
            Self::AnalyticAffine => "analytic_affine",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimateStatus {
    Ok,
    /// Importance weights have effective sample size below 10.
    LowEss,
    /// Reference and target overlap too little for the bridge to be trusted.
    UnreliableBridge,
    /// Too few chain states for a standard error.
    DegenerateChain,
}

#[derive(Debug, Clone)]
pub struct DensityEstimate {
    pub value: f64,
    /// `ln value`, kept separately because values can leave the `f64` range in high dimension.
    pub log_value: f64,
    pub std_err: f64,
    pub method: DensityMethod,
    pub n_used: usize,
    pub bandwidth_or_delta: Option<f64>,
    pub status: EstimateStatus,
}

impl DensityEstimate {
    fn from_parts(value: f64, std_err: f64, method: DensityMethod, n_used: usize, h: Option<f64>, status: EstimateStatus) -> Self {
        Self { value, log_value: value.ln(), std_err, method, n_used, bandwidth_or_delta: h, status }
    }
}

/// Closed-form pieces of the density on an affine level set `{x : G x = c}` under `N(mu, sigma^2 I)`.
#[derive(Debug, Clone)]
pub struct AffineDensity {
    /// Log density of `G x` at `c`, ignoring the region in which the affine piece is valid.
    pub log_untruncated: f64,
    /// Conditional probability that `x` lies in the region given `G x = c`.
    pub region_mass: f64,
    pub region_mass_se: f64,
    /// Conditional mean of `x` given `G x = c`: the point of the level set nearest `mu`.
    pub center: DVector<f64>,
}

/// Constant Jacobian `G` and right-hand side `c` of an affine level set `{G x = c}`.
pub fn affine_structure<L: LevelSet + ?Sized>(level: &L) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = level.input_dim();
    let k = level.output_dim();
    let zero = DVector::zeros(n);
    if level.curvature(&zero, &DVector::from_element(k, 1.0)).is_some() {
        return Err(Error::Unsupported("closed-form density needs an affine level set".into()));
    }
    let g = level.constraint_jacobian(&zero);
    let c = -level.residual(&zero);
    Ok((g, c))
}

/// Gaussian pushforward density on an affine level set with the region mass from `n_mc`
/// conditional draws; `n_mc = 0` skips the region and reports mass one.
pub fn affine_density_parts<L, R>(level: &L, spec: &LikelihoodSpec, n_mc: usize, rng: &mut R) -> Result<AffineDensity>
where
    L: LevelSet + ?Sized,
    R: Rng + ?Sized,
{
    let n = level.input_dim();
    let k = level.output_dim();
    let (g, c) = affine_structure(level)?;
    let sigma = spec.sigma;
    let mu = spec.mean(n)?;
    let ggt = &g * g.transpose();
    let chol = ggt.clone().cholesky().ok_or_else(|| Error::Singular("G G^T is not positive definite".into()))?;
    let d = &c - &g * &mu;
    let w = chol.solve(&d);
    let log_det = linalg::log_det_spd(&ggt).ok_or_else(|| Error::Singular("G G^T is not positive definite".into()))?;
    let log_untruncated = -0.5 * k as f64 * (2.0 * PI * sigma * sigma).ln() - 0.5 * log_det - d.dot(&w) / (2.0 * sigma * sigma);
    let center = &mu + g.tr_mul(&w);

    let (region_mass, region_mass_se) = if n_mc == 0 {
        (1.0, 0.0)
    } else if k == n {
        (if level.in_region(&center) { 1.0 } else { 0.0 }, 0.0)
    } else {
        let basis = linalg::null_space(&g)?;
        let d_t = basis.ncols();
        let mut hits = 0usize;
        for _ in 0..n_mc {
            let z = DVector::from_fn(d_t, |_, _| StandardNormal.sample(rng));
            let x = &center + (&basis * z) * sigma;
            if level.in_region(&x) {
                hits += 1;
            }
        }
        let m = hits as f64 / n_mc as f64;
        (m, (m * (1.0 - m) / n_mc as f64).sqrt())
    };
    Ok(AffineDensity { log_untruncated, region_mass, region_mass_se, center })
}

/// Exact density on an affine level set, with region truncation estimated from `n_mc` draws.
pub fn inner_density_analytic_affine<L, R>(level: &L, spec: &LikelihoodSpec, n_mc: usize, rng: &mut R) -> Result<DensityEstimate>
where
    L: LevelSet + ?Sized,
    R: Rng + ?Sized,
{
    let parts = affine_density_parts(level, spec, n_mc, rng)?;
    let scale = parts.log_untruncated.exp();
    Ok(DensityEstimate {
        value: scale * parts.region_mass,
        log_value: parts.log_untruncated + parts.region_mass.ln(),
        std_err: scale * parts.region_mass_se,
        method: DensityMethod::AnalyticAffine,
        n_used: n_mc,
        bandwidth_or_delta: None,
        status: EstimateStatus::Ok,
    })
}

/// Ambient importance-sampling proposal.
#[derive(Debug, Clone)]
pub enum IsProposal {
    /// Draw from `p(x | theta0)` itself; importance weights are one.
    Likelihood,
    /// Isotropic Gaussian `N(mean, sd^2 I)`.
    Gaussian { mean: DVector<f64>, sd: f64 },
}

impl IsProposal {
    fn draw<R: Rng + ?Sized>(&self, spec: &LikelihoodSpec, n: usize, rng: &mut R) -> Result<(DVector<f64>, f64)> {
        match self {
            Self::Likelihood => Ok((spec.sample(n, rng)?, 0.0)),
            Self::Gaussian { mean, sd } => {
                if mean.len() != n || !(*sd > 0.0) {
                    return Err(Error::Input("Gaussian proposal must match the data length and have sd > 0".into()));
                }
                let z = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
                let x = mean + &z * *sd;
                let log_q = -0.5 * n as f64 * (2.0 * PI * sd * sd).ln() - 0.5 * z.norm_squared();
                Ok((x.clone(), spec.log_density(&x)? - log_q))
            }
        }
    }
}

/// Isotropic Gaussian kernel `K_h(u)` on `R^k`.
pub fn gaussian_kernel(u: &DVector<f64>, h: f64) -> f64 {
    let k = u.len() as f64;
    (-0.5 * k * (2.0 * PI * h * h).ln() - u.norm_squared() / (2.0 * h * h)).exp()
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Kernel-mollified ambient estimator `(1/n) sum p(x_i) K_h(theta_hat(x_i) - theta') / q(x_i)`.
///
/// Draws whose estimate leaves the chart contribute zero.
pub fn inner_density_ambient_is<E, R>(
    estimator: &E,
    theta_prime: &DVector<f64>,
    spec: &LikelihoodSpec,
    bandwidth: f64,
    n: usize,
    proposal: &IsProposal,
    rng: &mut R,
) -> Result<DensityEstimate>
where
    E: ChartEstimator + ?Sized,
    R: Rng + ?Sized,
{
    if !(bandwidth > 0.0) || n == 0 {
        return Err(Error::Input(format!("need bandwidth > 0 and n >= 1, got {bandwidth} and {n}")));
    }
    if theta_prime.len() != estimator.chart_dim() {
        return Err(Error::Input("level length does not match the chart dimension".into()));
    }
    let dim = estimator.data_dim();
    let mut h = Vec::with_capacity(n);
    for _ in 0..n {
        let (x, log_w) = proposal.draw(spec, dim, rng)?;
        let v = match estimator.chart_estimate(&x) {
            Some(t) => log_w.exp() * gaussian_kernel(&(t - theta_prime), bandwidth),
            None => 0.0,
        };
        h.push(v);
    }
    let (value, se) = mean_and_se(&h);
    let sum: f64 = h.iter().sum();
    let sum_sq: f64 = h.iter().map(|v| v * v).sum();
    let ess = if sum_sq > 0.0 { sum * sum / sum_sq } else { 0.0 };
    let status = if ess < 10.0 { EstimateStatus::LowEss } else { EstimateStatus::Ok };
    Ok(DensityEstimate::from_parts(value, se, DensityMethod::AmbientIs, n, Some(bandwidth), status))
}

/// Ambient estimates at several bandwidths, extrapolated to zero bandwidth by a weighted fit
/// of `a + b h^2`; the reported value and standard error are those of `a`.
pub fn inner_density_ambient_is_extrapolated<E, R>(
    estimator: &E,
    theta_prime: &DVector<f64>,
    spec: &LikelihoodSpec,
    bandwidths: &[f64],
    n: usize,
    proposal: &IsProposal,
    rng: &mut R,
) -> Result<DensityEstimate>
where
    E: ChartEstimator + ?Sized,
    R: Rng + ?Sized,
{
    if bandwidths.len() < 2 {
        return Err(Error::Input("extrapolation needs at least two bandwidths".into()));
    }
    let estimates: Vec<DensityEstimate> = bandwidths
        .iter()
        .map(|&h| inner_density_ambient_is(estimator, theta_prime, spec, h, n, proposal, rng))
        .collect::<Result<_>>()?;
    let weights: Vec<f64> = estimates
        .iter()
        .map(|e| if e.std_err > 0.0 && e.std_err.is_finite() { 1.0 / (e.std_err * e.std_err) } else { 1.0 })
        .collect();
    let mut xtwx = DMatrix::<f64>::zeros(2, 2);
    let mut xtwy = DVector::<f64>::zeros(2);
    for ((e, h), w) in estimates.iter().zip(bandwidths).zip(&weights) {
        let row = [1.0, h * h];
        for i in 0..2 {
            xtwy[i] += w * row[i] * e.value;
            for j in 0..2 {
                xtwx[(i, j)] += w * row[i] * row[j];
            }
        }
    }
    let inv = xtwx.try_inverse().ok_or_else(|| Error::Input("bandwidths must be distinct".into()))?;
    let coef = &inv * xtwy;
    // With inverse-variance weights the covariance of the fit is (X^T W X)^{-1}.
    let se = inv[(0, 0)].max(0.0).sqrt();
    let status = if estimates.iter().any(|e| e.status == EstimateStatus::LowEss) { EstimateStatus::LowEss } else { EstimateStatus::Ok };
    let h_min = bandwidths.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(DensityEstimate::from_parts(coef[0], se, DensityMethod::AmbientIs, n * bandwidths.len(), Some(h_min), status))
}

/// Thickened level-set estimator for a scalar estimator with `log_lik` as the integrand.
///
/// Samples uniformly from a box aligned with the level-set normal at the point nearest the
/// likelihood mean: normal half-width `2 delta / |g|`, tangent half-width `6.5 sigma`.
pub(crate) fn thickened_with<E, L, F, R>(
    estimator: &E,
    level: &L,
    center_hint: &DVector<f64>,
    sigma: f64,
    log_lik: F,
    delta: f64,
    n: usize,
    rng: &mut R,
) -> Result<DensityEstimate>
where
    E: ChartEstimator + ?Sized,
    L: LevelSet + ?Sized,
    F: Fn(&DVector<f64>) -> Result<f64>,
    R: Rng + ?Sized,
{
    if level.output_dim() != 1 || estimator.chart_dim() != 1 {
        return Err(Error::Unsupported("the thickened estimator needs a scalar estimator".into()));
    }
    if !(delta > 0.0) || n == 0 {
        return Err(Error::Input(format!("need delta > 0 and n >= 1, got {delta} and {n}")));
    }
    let theta_prime = level.target()[0];
    let center = match level.affine_projection(center_hint) {
        Some((x, _)) => x,
        None => {
            let res = crate::projection::project(level, center_hint, &Default::default());
            if res.feas_residual > 1e-8 {
                return Err(Error::Solver { iterations: res.iterations, best_residual: res.feas_residual });
            }
            res.x_star
        }
    };
    let g = level.constraint_jacobian(&center);
    let g_norm = g.norm();
    let normal = g.transpose() / g_norm;
    let tangent = linalg::null_space(&g)?;
    let half_normal = 2.0 * delta / g_norm;
    let half_tangent = 6.5 * sigma;
    let d_t = tangent.ncols();
    let log_vol = (2.0 * half_normal).ln() + d_t as f64 * (2.0 * half_tangent).ln();

    let mut z = Vec::with_capacity(n);
    let mut hits = 0usize;
    for _ in 0..n {
        let a = rng.gen_range(-half_normal..half_normal);
        let b = DVector::from_fn(d_t, |_, _| rng.gen_range(-half_tangent..half_tangent));
        let x = &center + &normal * a + &tangent * b;
        let hit = estimator.chart_estimate(&x).is_some_and(|t| (t[0] - theta_prime).abs() < delta);
        if hit {
            hits += 1;
            z.push((log_vol + log_lik(&x)? - (2.0 * delta).ln()).exp());
        } else {
            z.push(0.0);
        }
    }
    let rate = hits as f64 / n as f64;
    if rate < 1e-4 {
        return Err(Error::Inefficient(format!("slab acceptance {rate:.2e} is below 1e-4; shrink the box")));
    }
    let (value, se) = mean_and_se(&z);
    Ok(DensityEstimate::from_parts(value, se, DensityMethod::Thickened, n, Some(delta), EstimateStatus::Ok))
}

/// Thickened level-set estimator `Vol(slab) * mean(p) / (2 delta)` for scalar estimators.
pub fn inner_density_thickened<E, L, R>(estimator: &E, level: &L, spec: &LikelihoodSpec, delta: f64, n: usize, rng: &mut R) -> Result<DensityEstimate>
where
    E: ChartEstimator + ?Sized,
    L: LevelSet + ?Sized,
    R: Rng + ?Sized,
{
    let mu = spec.mean(level.input_dim())?;
    thickened_with(estimator, level, &mu, spec.sigma, |x| spec.log_density(x), delta, n, rng)
}

/// Gaussian reference for the bridge, in coordinates of the tangent frame at `center`.
#[derive(Debug, Clone)]
pub enum BridgeReference {
    /// Mean and covariance of the chain states.
    ChainMoments,
    /// `center` must lie on the level set; `cov` is (N - k) x (N - k).
    Explicit { center: DVector<f64>, cov: DMatrix<f64> },
}

struct GaussianRef {
    mean: DVector<f64>,
    chol_l: DMatrix<f64>,
    log_norm: f64,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl GaussianRef {
    fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        let chol = cov.cholesky().ok_or_else(|| Error::Singular("reference covariance is not positive definite".into()))?;
        let chol_l = chol.l();
        let log_det: f64 = 2.0 * chol_l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let log_norm = -0.5 * d as f64 * (2.0 * PI).ln() - 0.5 * log_det;
        Ok(Self { mean, chol_l, log_norm, chol })
    }

    fn log_density(&self, u: &DVector<f64>) -> f64 {
        let r = u - &self.mean;
        self.log_norm - 0.5 * r.dot(&self.chol.solve(&r))
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.mean.len(), |_, _| StandardNormal.sample(rng));
        &self.mean + &self.chol_l * z
    }
}

/// Normalizing constant of the chain target `p(x | theta0) / J` on an affine level set by the
/// iterative optimal bridge against a Gaussian on the tangent frame.
///
/// The chain must target that density. Standard errors combine the i.i.d. reference term with
/// a batch-means variance for the chain term.
pub fn inner_density_mcmc_bridge<L, R>(
    chain: &Chain,
    level: &L,
    spec: &LikelihoodSpec,
    reference: &BridgeReference,
    n_ref: usize,
    rng: &mut R,
) -> Result<DensityEstimate>
where
    L: LevelSet + ?Sized,
    R: Rng + ?Sized,
{
    if chain.samples.is_empty() {
        return Err(Error::Input("the bridge needs recorded chain states".into()));
    }
    if n_ref == 0 {
        return Err(Error::Input("the bridge needs at least one reference draw".into()));
    }
    let (g, _) = affine_structure(level)?;
    let log_j = linalg::log_volume_factor(&g.transpose())
        .ok_or_else(|| Error::Singular("level-set Jacobian is rank deficient".into()))?;
    let log_target = |x: &DVector<f64>| -> Result<f64> {
        if level.in_region(x) {
            Ok(spec.log_density(x)? - log_j)
        } else {
            Ok(f64::NEG_INFINITY)
        }
    };
    let n1 = chain.samples.len();
    let degenerate = n1 < 2;
    let (center, cov) = match reference {
        BridgeReference::Explicit { center, cov } => (center.clone(), Some(cov.clone())),
        BridgeReference::ChainMoments => {
            let mut m = DVector::zeros(chain.samples[0].len());
            for s in &chain.samples {
                m += s;
            }
            (m / n1 as f64, None)
        }
    };
    let basis = linalg::null_space(&g)?;
    let d = basis.ncols();
    if d == 0 {
        let lv = log_target(&center)?;
        return Ok(DensityEstimate { value: lv.exp(), log_value: lv, std_err: 0.0, method: DensityMethod::McmcBridge, n_used: n1, bandwidth_or_delta: None, status: EstimateStatus::Ok });
    }
    let coords: Vec<DVector<f64>> = chain.samples.iter().map(|s| basis.tr_mul(&(s - &center))).collect();
    let cov = match cov {
        Some(c) => c,
        None if degenerate => DMatrix::identity(d, d) * (spec.sigma * spec.sigma),
        None => {
            let mut mean = DVector::zeros(d);
            for u in &coords {
                mean += u;
            }
            mean /= n1 as f64;
            let mut c = DMatrix::zeros(d, d);
            for u in &coords {
                let r = u - &mean;
                c += &r * r.transpose();
            }
            c /= (n1 - 1) as f64;
            let jitter = 1e-10 * (c.trace() / d as f64).max(f64::MIN_POSITIVE);
            c + DMatrix::identity(d, d) * jitter
        }
    };
    let reference = GaussianRef::new(DVector::zeros(d), cov)?;

    let l1: Vec<f64> = chain
        .samples
        .iter()
        .zip(&coords)
        .map(|(x, u)| Ok(log_target(x)? - reference.log_density(u)))
        .collect::<Result<_>>()?;
    let mut l2 = Vec::with_capacity(n_ref);
    for _ in 0..n_ref {
        let u = reference.draw(rng);
        let x = &center + &basis * &u;
        l2.push(log_target(&x)? - reference.log_density(&u));
    }
    let mut finite: Vec<f64> = l1.iter().cloned().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return Err(Error::Input("no chain state has a finite target density".into()));
    }
    finite.sort_by(|a, b| a.total_cmp(b));
    let shift = finite[finite.len() / 2];
    let a: Vec<f64> = l2.iter().map(|v| (v - shift).exp()).collect();
    let b: Vec<f64> = l1.iter().map(|v| (v - shift).exp()).collect();
    let s1 = n1 as f64 / (n1 + n_ref) as f64;
    let s2 = 1.0 - s1;
    let terms = |r: f64| -> (Vec<f64>, Vec<f64>) {
        let ta = a.iter().map(|&v| v / (s1 * v + s2 * r)).collect();
        let tb = b.iter().map(|&v| 1.0 / (s1 * v + s2 * r)).collect();
        (ta, tb)
    };
    let mut r = a.iter().sum::<f64>() / n_ref as f64;
    if !(r > 0.0) {
        r = 1.0;
    }
    for _ in 0..1000 {
        let (ta, tb) = terms(r);
        let next = (ta.iter().sum::<f64>() / n_ref as f64) / (tb.iter().sum::<f64>() / n1 as f64);
        let done = ((next - r) / r).abs() < 1e-13;
        r = next;
        if done {
            break;
        }
    }
    let (ta, tb) = terms(r);
    let (mean_a, se_a) = mean_and_se(&ta);
    let mean_b = tb.iter().sum::<f64>() / n1 as f64;
    let se_b = if degenerate { f64::INFINITY } else { batch_means_se(&tb) };
    let se_a = if n_ref < 2 { f64::INFINITY } else { se_a };
    let rel = ((se_a / mean_a).powi(2) + (se_b / mean_b).powi(2)).sqrt();

    let wmax = l2.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let overlap = if wmax.is_finite() {
        let w: Vec<f64> = l2.iter().map(|v| (v - wmax).exp()).collect();
        let sw: f64 = w.iter().sum();
        let sw2: f64 = w.iter().map(|v| v * v).sum();
        sw * sw / (n_ref as f64 * sw2)
    } else {
        0.0
    };
    let log_value = r.ln() + shift;
    let value = log_value.exp();
    let status = if degenerate {
        EstimateStatus::DegenerateChain
    } else if overlap < 0.01 {
        EstimateStatus::UnreliableBridge
    } else {
        EstimateStatus::Ok
    };
    Ok(DensityEstimate { value, log_value, std_err: value * rel, method: DensityMethod::McmcBridge, n_used: n1 + n_ref, bandwidth_or_delta: None, status })
}
