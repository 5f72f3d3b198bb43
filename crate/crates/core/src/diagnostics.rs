//! Chain-quality metrics, the feasibility-tolerance study and the step-time scaling benchmark.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{gen_toeplitz_data, lasso_fit, lambda_max, EstimatorResult, LassoChart, LassoOptions, LevelSet};
use crate::nml::weighted_line;
use crate::projection::SolverChoice;
use crate::sampler::{init_state, ppmh_step_with, run_chain, Chain, RejectReason, SamplerConfig, TargetDensity};

/// Biased-normalized autocorrelations at lags `0..=max_lag`.
///
/// A constant series has no defined correlation; it yields `[1, 0, 0, ...]` and `false`.
pub fn acf_flagged(series: &[f64], max_lag: usize) -> (Vec<f64>, bool) {
    let n = series.len();
    let max_lag = max_lag.min(n.saturating_sub(1));
    let mean = series.iter().sum::<f64>() / n.max(1) as f64;
    let c0: f64 = series.iter().map(|v| (v - mean) * (v - mean)).sum();
    let mut out = vec![0.0; max_lag + 1];
    out[0] = 1.0;
    if !(c0 > 0.0) {
        return (out, false);
    }
    for (lag, slot) in out.iter_mut().enumerate().skip(1) {
        let c: f64 = (0..n - lag).map(|i| (series[i] - mean) * (series[i + lag] - mean)).sum();
        *slot = c / c0;
    }
    (out, true)
}

/// Autocorrelations at lags `0..=max_lag`; see [`acf_flagged`].
pub fn acf(series: &[f64], max_lag: usize) -> Vec<f64> {
    acf_flagged(series, max_lag).0
}

/// Effective sample size with Geyer's initial positive sequence truncation, capped at `n`.
pub fn ess(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 2 {
        return n as f64;
    }
    let (rho, ok) = acf_flagged(series, n - 1);
    if !ok {
        return n as f64;
    }
    let mut tau = -1.0;
    let mut m = 0;
    while 2 * m + 1 < rho.len() {
        let pair = rho[2 * m] + rho[2 * m + 1];
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        m += 1;
    }
    let tau = tau.max(1.0 / n as f64);
    (n as f64 / tau).min(n as f64)
}

/// Standard error of the mean from `floor(sqrt(n))` non-overlapping batches.
pub fn batch_means_se(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 4 {
        return f64::INFINITY;
    }
    let batches = (n as f64).sqrt().floor() as usize;
    let size = n / batches;
    let means: Vec<f64> = (0..batches).map(|b| series[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64).collect();
    let grand = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>() / (batches - 1) as f64;
    (var / batches as f64).sqrt()
}

/// Summary statistics of one chain.
#[derive(Debug, Clone)]
pub struct ChainReport {
    pub acceptance_rate: f64,
    /// Autocorrelation of the log-target trace.
    pub acf: Vec<f64>,
    pub acf_k: Vec<f64>,
    pub ess: f64,
    pub k_histogram: BTreeMap<usize, usize>,
    pub rejection_breakdown: BTreeMap<RejectReason, usize>,
    pub length: usize,
}

impl ChainReport {
    pub fn from_chain(chain: &Chain, max_lag: usize) -> Self {
        let mut k_histogram = BTreeMap::new();
        for k in &chain.k_trace {
            *k_histogram.entry(*k).or_insert(0) += 1;
        }
        let mut rejection_breakdown: BTreeMap<RejectReason, usize> = RejectReason::ALL.iter().map(|r| (*r, 0)).collect();
        for r in chain.reasons.iter().flatten() {
            *rejection_breakdown.entry(*r).or_insert(0) += 1;
        }
        let k_series: Vec<f64> = chain.k_trace.iter().map(|k| *k as f64).collect();
        Self {
            acceptance_rate: chain.acceptance_rate(),
            acf: acf(&chain.log_target, max_lag),
            acf_k: acf(&k_series, max_lag),
            ess: ess(&chain.log_target),
            k_histogram,
            rejection_breakdown,
            length: chain.len(),
        }
    }

    pub fn rejected(&self) -> usize {
        self.rejection_breakdown.values().sum()
    }
}

/// One feasibility tolerance of the study.
#[derive(Debug, Clone)]
pub struct ToleranceRow {
    pub eps: f64,
    pub mean: f64,
    /// `|mean - reference mean|`.
    pub deviation: f64,
    /// Batch-means standard error of the paired difference to the reference chain.
    pub noise_se: f64,
    pub ess: f64,
}

#[derive(Debug, Clone)]
pub struct ToleranceStudy {
    pub reference_eps: f64,
    pub reference_mean: f64,
    /// Rows in the order of the non-reference tolerances.
    pub rows: Vec<ToleranceRow>,
    /// Whether deviations never increase as `eps` decreases.
    pub monotone: bool,
    /// Least-squares `c` in `deviation = c eps` over rows whose deviation exceeds twice its noise.
    pub fitted_c: Option<f64>,
    /// Some chain had an effective sample size below `min_ess`.
    pub underpowered: bool,
}

/// Runs one chain per tolerance with a shared seed and compares the mean of `functional`
/// against the chain at the smallest tolerance, which must be at least 100 times smaller than
/// every other entry. Projections use the augmented Lagrangian solver, whose stopping point is
/// set by the tolerance.
pub fn tolerance_bias_study<L, T, F>(
    level: &L,
    x_init: &DVector<f64>,
    target: &T,
    eps_list: &[f64],
    functional: F,
    cfg: &SamplerConfig,
    min_ess: f64,
) -> Result<ToleranceStudy>
where
    L: LevelSet + ?Sized,
    T: TargetDensity + ?Sized,
    F: Fn(&DVector<f64>) -> f64,
{
    if eps_list.len() < 2 || eps_list.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::Input("need at least two positive tolerances".into()));
    }
    let (ref_idx, &reference_eps) = eps_list
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("list is nonempty");
    let others: Vec<f64> = eps_list.iter().enumerate().filter(|(i, _)| *i != ref_idx).map(|(_, e)| *e).collect();
    if others.iter().any(|e| *e < 100.0 * reference_eps && *e != reference_eps) {
        return Err(Error::Input("the reference tolerance must be at least 100 times smaller than the others".into()));
    }
    let trace = |eps: f64| -> Result<Vec<f64>> {
        let mut c = cfg.clone();
        c.projection.eps_feas = eps;
        c.projection.solver = SolverChoice::AlmOnly;
        c.record_samples = true;
        Ok(run_chain(level, x_init, target, &c)?.functional(&functional))
    };
    let ref_trace = trace(reference_eps)?;
    let reference_mean = ref_trace.iter().sum::<f64>() / ref_trace.len() as f64;
    let mut underpowered = ess(&ref_trace) < min_ess;
    let mut rows = Vec::with_capacity(others.len());
    for eps in others {
        let t = trace(eps)?;
        let mean = t.iter().sum::<f64>() / t.len() as f64;
        let diff: Vec<f64> = t.iter().zip(&ref_trace).map(|(a, b)| a - b).collect();
        let e = ess(&t);
        underpowered |= e < min_ess;
        rows.push(ToleranceRow { eps, mean, deviation: (mean - reference_mean).abs(), noise_se: batch_means_se(&diff), ess: e });
    }
    let mut by_eps: Vec<&ToleranceRow> = rows.iter().collect();
    by_eps.sort_by(|a, b| b.eps.total_cmp(&a.eps));
    let monotone = by_eps.windows(2).all(|w| w[1].deviation <= w[0].deviation);
    let signal: Vec<&ToleranceRow> = rows.iter().filter(|r| r.deviation > 2.0 * r.noise_se).collect();
    let fitted_c = (!signal.is_empty()).then(|| {
        signal.iter().map(|r| r.deviation * r.eps).sum::<f64>() / signal.iter().map(|r| r.eps * r.eps).sum::<f64>()
    });
    Ok(ToleranceStudy { reference_eps, reference_mean, rows, monotone, fitted_c, underpowered })
}

/// Writes `eps,mean,deviation,noise_se,ess` with the reference as the first row.
pub fn write_tolerance_csv(study: &ToleranceStudy, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["eps", "mean", "deviation", "noise_se", "ess"])?;
    w.write_record([format!("{}", study.reference_eps), format!("{}", study.reference_mean), "0".into(), "0".into(), String::new()])?;
    for r in &study.rows {
        w.write_record([r.eps, r.mean, r.deviation, r.noise_se, r.ess].map(|v| format!("{v}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Bisects `lambda` on a log scale until the Lasso fit has exactly `k` active coefficients.
pub fn lambda_for_k(x: &nalgebra::DMatrix<f64>, y: &DVector<f64>, k: usize, opts: &LassoOptions) -> Result<EstimatorResult> {
    let mut hi = lambda_max(x, y);
    let mut lo = hi * 1e-4;
    for _ in 0..100 {
        let mid = (lo * hi).sqrt();
        let fit = lasso_fit(x, y, mid, opts)?;
        if fit.k() == k {
            return Ok(fit);
        }
        if fit.k() > k {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Input(format!("no lambda gives exactly {k} active coefficients")))
}

#[derive(Debug, Clone)]
pub struct ScalingGridSpec {
    pub n_sweep: Vec<usize>,
    /// Ambient dimension for the N-sweep.
    pub n_sweep_p: usize,
    pub p_sweep: Vec<usize>,
    /// Sample size for the P-sweep.
    pub p_sweep_n: usize,
    pub k: usize,
    pub rho: f64,
    pub snr: f64,
    pub seed: u64,
}

impl Default for ScalingGridSpec {
    fn default() -> Self {
        Self {
            n_sweep: vec![100, 200, 400],
            n_sweep_p: 500,
            p_sweep: vec![100, 200, 400, 1000, 2000],
            p_sweep_n: 100,
            k: 5,
            rho: 0.5,
            snr: 3.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Sweep {
    N,
    P,
}

#[derive(Debug, Clone)]
pub struct ScalingCell {
    pub sweep: Sweep,
    pub n: usize,
    pub p: usize,
    pub k: usize,
    /// Median over batches of the mean step time.
    pub mean_step_seconds: f64,
    /// Standard deviation of the batch means.
    pub sd: f64,
    pub steps_per_batch: usize,
}

#[derive(Debug, Clone)]
pub struct ScalingReport {
    pub grid: Vec<ScalingCell>,
    /// Slope of `ln time` on `ln N` over the N-sweep; `None` with fewer than two sizes.
    pub fitted_exponent_vs_n: Option<f64>,
    /// Max over min step time across the P-sweep; `None` with fewer than two sizes.
    pub dimension_invariance_ratio: Option<f64>,
}

const BATCHES: usize = 5;
const MIN_BATCH_SECONDS: f64 = 1e-4;

/// A chain positioned on one benchmark level set, ready to be timed.
struct BenchCell {
    sweep: Sweep,
    n: usize,
    p: usize,
    k: usize,
    level: crate::model::LassoLevelSet,
    state: crate::sampler::ChainState,
    rng: ChaCha8Rng,
    step_scale: f64,
}

impl BenchCell {
    /// Fits a Lasso with `k` active coefficients and starts a chain on its level set at the
    /// observed response. Without a configured scale the step is `0.01 sigma`, small enough that
    /// almost every step completes both projections instead of leaving the sign region early.
    fn new<T: TargetDensity + ?Sized>(sweep: Sweep, n: usize, p: usize, spec: &ScalingGridSpec, cfg: &SamplerConfig, target: &T) -> Result<Self> {
        let beta: Vec<f64> = (0..spec.k).map(|j| if j % 2 == 0 { 2.0 } else { -1.5 }).collect();
        let data = gen_toeplitz_data(n, p, spec.rho, spec.snr, &beta, spec.seed ^ ((n as u64) << 20) ^ p as u64)?;
        let opts = LassoOptions::default();
        let fit = lambda_for_k(&data.x, &data.y, spec.k, &opts)?;
        let chart = Arc::new(LassoChart::from_fit(Arc::clone(&data.x), &fit, opts)?);
        let level = chart.level_set(fit.theta_hat.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let state = init_state(&level, data.y.clone(), target, cfg, &mut rng)?;
        let step_scale = cfg.step_scale.unwrap_or(0.01 * data.meta.noise_sd);
        Ok(Self { sweep, n, p, k: fit.k(), level, state, rng, step_scale })
    }

    fn steps<T: TargetDensity + ?Sized>(&mut self, count: usize, cfg: &SamplerConfig, target: &T) {
        let d = self.state.frame.dim();
        for _ in 0..count {
            let v = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut self.rng));
            let (next, _) = ppmh_step_with(&self.state, &self.level, target, self.step_scale, v, cfg, &mut self.rng);
            self.state = next;
        }
    }

    fn time<T: TargetDensity + ?Sized>(&mut self, count: usize, cfg: &SamplerConfig, target: &T) -> f64 {
        let clock = Instant::now();
        self.steps(count, cfg, target);
        clock.elapsed().as_secs_f64()
    }
}

/// Times the sampler step over an N-sweep at fixed `(P, k)` and a P-sweep at fixed `(N, k)`.
///
/// Cells run on the calling thread. Each of the five timed rounds visits every cell once, so
/// slow drift in machine load spreads over all cells instead of skewing one. A cell whose batch
/// takes under 100 microseconds doubles its batch size before the rounds start.
pub fn scaling_benchmark<T: TargetDensity + ?Sized>(
    spec: &ScalingGridSpec,
    steps_per_cell: usize,
    warmup: usize,
    cfg: &SamplerConfig,
    target: &T,
) -> Result<ScalingReport> {
    if spec.n_sweep.is_empty() && spec.p_sweep.is_empty() {
        return Err(Error::Input("the scaling grid is empty".into()));
    }
    let mut cells = Vec::new();
    for &n in &spec.n_sweep {
        cells.push(BenchCell::new(Sweep::N, n, spec.n_sweep_p, spec, cfg, target)?);
    }
    for &p in &spec.p_sweep {
        cells.push(BenchCell::new(Sweep::P, spec.p_sweep_n, p, spec, cfg, target)?);
    }
    let mut per_batch = vec![(steps_per_cell / BATCHES).max(1); cells.len()];
    for (cell, size) in cells.iter_mut().zip(per_batch.iter_mut()) {
        cell.steps(warmup, cfg, target);
        while cell.time(*size, cfg, target) < MIN_BATCH_SECONDS {
            *size *= 2;
        }
    }
    let mut means = vec![Vec::with_capacity(BATCHES); cells.len()];
    for _ in 0..BATCHES {
        for (i, cell) in cells.iter_mut().enumerate() {
            means[i].push(cell.time(per_batch[i], cfg, target) / per_batch[i] as f64);
        }
    }
    let grid: Vec<ScalingCell> = cells
        .iter()
        .zip(&means)
        .zip(&per_batch)
        .map(|((cell, m), &size)| {
            let mut sorted = m.clone();
            sorted.sort_by(|a, b| a.total_cmp(b));
            let mean = m.iter().sum::<f64>() / BATCHES as f64;
            let sd = (m.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (BATCHES - 1) as f64).sqrt();
            ScalingCell { sweep: cell.sweep.clone(), n: cell.n, p: cell.p, k: cell.k, mean_step_seconds: sorted[BATCHES / 2], sd, steps_per_batch: size }
        })
        .collect();
    let n_cells: Vec<&ScalingCell> = grid.iter().filter(|c| c.sweep == Sweep::N).collect();
    let fitted_exponent_vs_n = (n_cells.len() >= 2).then(|| {
        let x: Vec<f64> = n_cells.iter().map(|c| (c.n as f64).ln()).collect();
        let y: Vec<f64> = n_cells.iter().map(|c| c.mean_step_seconds.ln()).collect();
        weighted_line(&x, &y, &vec![1.0; x.len()]).0
    });
    let p_times: Vec<f64> = grid.iter().filter(|c| c.sweep == Sweep::P).map(|c| c.mean_step_seconds).collect();
    let dimension_invariance_ratio = (p_times.len() >= 2).then(|| {
        p_times.iter().cloned().fold(f64::MIN, f64::max) / p_times.iter().cloned().fold(f64::MAX, f64::min)
    });
    Ok(ScalingReport { grid, fitted_exponent_vs_n, dimension_invariance_ratio })
}

/// Writes `sweep,n,p,k,mean_step_seconds,sd,steps_per_batch`.
pub fn write_scaling_csv(report: &ScalingReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sweep", "n", "p", "k", "mean_step_seconds", "sd", "steps_per_batch"])?;
    for c in &report.grid {
        w.write_record([
            if c.sweep == Sweep::N { "n".to_string() } else { "p".to_string() },
            c.n.to_string(),
            c.p.to_string(),
            c.k.to_string(),
            format!("{}", c.mean_step_seconds),
            format!("{}", c.sd),
            c.steps_per_batch.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use crate::model::SphereConstraint;
    use crate::sampler::TargetKind;

    fn sphere_cfg() -> SamplerConfig {
        SamplerConfig { n_samples: 2000, burn_in: 100, step_scale: Some(0.3), seed: 5, ..Default::default() }
    }

    #[test]
    fn sphere_tolerance_deviations_shrink_with_eps() {
        let level = SphereConstraint::new(5, 1.0).unwrap();
        let x0 = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        let study = tolerance_bias_study(&level, &x0, &TargetKind::HausdorffUniform, &[1e-4, 1e-5, 1e-6, 1e-9], |x| x.norm_squared(), &sphere_cfg(), 10.0).unwrap();
        assert!(study.monotone, "{study:?}");
        let c = study.fitted_c.expect("deviations above noise");
        assert!(c.is_finite() && c > 0.0);
    }

    #[test]
    fn equal_tolerances_are_rejected_unless_separated() {
        let level = SphereConstraint::new(3, 1.0).unwrap();
        let x0 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        assert!(tolerance_bias_study(&level, &x0, &TargetKind::HausdorffUniform, &[1e-6, 1e-7], |x| x[0], &sphere_cfg(), 10.0).is_err());
    }

    #[test]
    fn equal_tolerances_give_zero_deviation() {
        let level = SphereConstraint::new(3, 1.0).unwrap();
        let x0 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let cfg = SamplerConfig { n_samples: 300, burn_in: 10, step_scale: Some(0.3), seed: 2, ..Default::default() };
        let study = tolerance_bias_study(&level, &x0, &TargetKind::HausdorffUniform, &[1e-6, 1e-6, 1e-6], |x| x[0], &cfg, 1.0).unwrap();
        assert!(study.rows.iter().all(|r| r.deviation == 0.0));
        assert!(study.fitted_c.is_none());
    }

    #[test]
    fn single_cell_grid_has_no_fit() {
        let spec = ScalingGridSpec { n_sweep: vec![40], n_sweep_p: 30, p_sweep: vec![], k: 3, ..Default::default() };
        let report = scaling_benchmark(&spec, 20, 5, &SamplerConfig::default(), &TargetKind::HausdorffUniform).unwrap();
        assert_eq!(report.grid.len(), 1);
        assert!(report.fitted_exponent_vs_n.is_none() && report.dimension_invariance_ratio.is_none());
        assert!(report.grid[0].mean_step_seconds > 0.0);
        assert_eq!(report.grid[0].k, 3);
    }

    #[test]
    fn empty_grid_is_an_error() {
        let spec = ScalingGridSpec { n_sweep: vec![], p_sweep: vec![], ..Default::default() };
        assert!(scaling_benchmark(&spec, 10, 1, &SamplerConfig::default(), &TargetKind::HausdorffUniform).is_err());
    }

    fn ar1(n: usize, phi: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let innov = (1.0 - phi * phi).sqrt();
        let mut x = 0.0;
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                x = phi * x + innov * z;
                x
            })
            .collect()
    }

    #[test]
    fn white_noise_acf_stays_in_band() {
        let s = ar1(10_000, 0.0, 1);
        let a = acf(&s, 20);
        assert_eq!(a[0], 1.0);
        assert!(a[1..].iter().all(|v| v.abs() < 3.0 / 100.0));
        let e = ess(&s) / 10_000.0;
        assert!((0.8..=1.2).contains(&e), "{e}");
    }

    #[test]
    fn ar1_acf_and_ess_follow_closed_forms() {
        let s = ar1(100_000, 0.9, 2);
        let a = acf(&s, 10);
        for (l, v) in a.iter().enumerate() {
            assert!((v - 0.9f64.powi(l as i32)).abs() < 0.05, "lag {l}: {v}");
        }
        let ratio = ess(&s) / 100_000.0;
        let want = 0.1 / 1.9;
        assert!((ratio / want - 1.0).abs() < 0.3, "{ratio}");
    }

    #[test]
    fn degenerate_series() {
        assert_eq!(ess(&[3.0]), 1.0);
        let (a, ok) = acf_flagged(&[2.0; 10], 3);
        assert!(!ok);
        assert_eq!(a, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn batch_means_matches_iid_error() {
        let s = ar1(10_000, 0.0, 3);
        let se = batch_means_se(&s);
        assert!((se / 0.01 - 1.0).abs() < 0.35, "{se}");
    }
}
