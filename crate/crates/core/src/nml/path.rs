//! Complexity, information criteria, cross-validation and held-out error along a Lasso path.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::complexity::{complexity_record, ComplexityConfig, ComplexityRecord};
use super::density::{inner_density_analytic_affine, inner_density_mcmc_bridge, BridgeReference, EstimateStatus};
use crate::diagnostics::ess;
use crate::error::{Error, Result};
use crate::model::{lasso_fit_warm, Dataset, DatasetMeta, EstimatorResult, LassoChart, LassoOptions, LikelihoodSpec};
use crate::sampler::{run_chain, SamplerConfig, TargetKind};

#[derive(Debug, Clone)]
pub struct PathConfig {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub grid_points: usize,
    pub complexity: ComplexityConfig,
    pub cv_folds: usize,
    pub fold_seed: u64,
    pub n_test: usize,
    pub test_seed: u64,
    /// Worker threads for the per-lambda cells; 0 uses the default pool.
    pub threads: usize,
    /// Runs a level-set chain at each fit and compares its bridge estimate with the closed form.
    pub chain: Option<SamplerConfig>,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            lambda_min: 0.05,
            lambda_max: 100.0,
            grid_points: 120,
            complexity: ComplexityConfig::default(),
            cv_folds: 5,
            fold_seed: 0,
            n_test: 1000,
            test_seed: 1,
            threads: 0,
            chain: None,
        }
    }
}

/// Logarithmically spaced, strictly increasing grid; a single point sits at `lo`.
pub fn lambda_grid(lo: f64, hi: f64, points: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0) || !(lo < hi) || points == 0 {
        return Err(Error::Input(format!("need 0 < lambda_min < lambda_max and points >= 1, got {lo}, {hi}, {points}")));
    }
    if points == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..points).map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp()).collect())
}

/// Fits every `lambda` from the largest down, warm-starting each from the previous solution.
pub fn fit_path(x: &DMatrix<f64>, y: &DVector<f64>, lambdas: &[f64], opts: &LassoOptions) -> Vec<Result<EstimatorResult>> {
    let mut out: Vec<Option<Result<EstimatorResult>>> = (0..lambdas.len()).map(|_| None).collect();
    let mut warm: Option<DVector<f64>> = None;
    let mut order: Vec<usize> = (0..lambdas.len()).collect();
    order.sort_by(|a, b| lambdas[*b].total_cmp(&lambdas[*a]));
    for i in order {
        let fit = lasso_fit_warm(x, y, lambdas[i], opts, warm.as_ref());
        if let Ok(f) = &fit {
            warm = Some(f.beta.clone());
        }
        out[i] = Some(fit);
    }
    out.into_iter().map(|f| f.expect("every grid point is fitted")).collect()
}

/// Mean squared prediction error and its standard error.
pub fn prediction_mse(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> (f64, f64) {
    let sq: Vec<f64> = (y - x * beta).iter().map(|r| r * r).collect();
    let n = sq.len() as f64;
    let m = sq.iter().sum::<f64>() / n;
    let var = sq.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (var / n).sqrt())
}

/// K-fold cross-validated prediction error per `lambda`, with folds from a seeded permutation.
pub fn cv_errors(x: &DMatrix<f64>, y: &DVector<f64>, lambdas: &[f64], folds: usize, seed: u64, opts: &LassoOptions) -> Result<Vec<f64>> {
    let n = x.nrows();
    if folds < 2 || folds > n {
        return Err(Error::Input(format!("need 2 <= folds <= N, got {folds} with N = {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let per_fold: Vec<Vec<f64>> = (0..folds)
        .into_par_iter()
        .map(|f| {
            let test: Vec<usize> = perm.iter().enumerate().filter(|(i, _)| i % folds == f).map(|(_, &r)| r).collect();
            let train: Vec<usize> = perm.iter().enumerate().filter(|(i, _)| i % folds != f).map(|(_, &r)| r).collect();
            let xt = x.select_rows(&train);
            let yt = DVector::from_iterator(train.len(), train.iter().map(|&r| y[r]));
            let xv = x.select_rows(&test);
            let yv = DVector::from_iterator(test.len(), test.iter().map(|&r| y[r]));
            fit_path(&xt, &yt, lambdas, opts)
                .into_iter()
                .map(|fit| fit.map(|f| prediction_mse(&xv, &yv, &f.beta).0).unwrap_or(f64::NAN))
                .collect()
        })
        .collect();
    Ok((0..lambdas.len()).map(|i| per_fold.iter().map(|v| v[i]).sum::<f64>() / folds as f64).collect())
}

/// Bridge estimate of the level-set density at the fit beside its closed form.
#[derive(Debug, Clone)]
pub struct ChainCheck {
    pub acceptance_rate: f64,
    pub ess: f64,
    pub log_f_bridge: f64,
    /// Standard error of the bridge estimate relative to its value.
    pub bridge_rel_se: f64,
    pub log_f_analytic: f64,
    pub bridge_status: EstimateStatus,
}

#[derive(Debug, Clone)]
pub struct PathRow {
    pub lambda: f64,
    pub record: Option<ComplexityRecord>,
    pub cv_error: f64,
    pub heldout_mse: f64,
    pub heldout_mse_se: f64,
    /// `ok`, or the error that stopped this cell.
    pub status: String,
    pub chain_check: Option<ChainCheck>,
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub criterion: String,
    pub lambda: f64,
    pub heldout_mse: f64,
    pub heldout_mse_se: f64,
}

#[derive(Debug, Clone)]
pub struct PathResult {
    /// One row per grid point in increasing `lambda`.
    pub rows: Vec<PathRow>,
    pub selections: Vec<Selection>,
    pub meta: DatasetMeta,
}

pub const CRITERIA: [&str; 5] = ["nml", "bic", "aic", "asymptotic_nml", "cv"];

fn criterion_value(row: &PathRow, name: &str) -> Option<f64> {
    if name == "cv" {
        return row.record.as_ref().map(|_| row.cv_error);
    }
    let r = row.record.as_ref()?;
    Some(match name {
        "nml" => r.codelength,
        "bic" => r.bic,
        "aic" => r.aic,
        "asymptotic_nml" => r.asymptotic_nml,
        _ => return None,
    })
}

fn chain_check(data: &Dataset, fit: &EstimatorResult, cfg: &SamplerConfig, opts: LassoOptions, seed: u64) -> Result<ChainCheck> {
    let chart = Arc::new(LassoChart::from_fit(Arc::clone(&data.x), fit, opts)?);
    let level = chart.level_set(fit.theta_hat.clone())?;
    let spec = LikelihoodSpec::gaussian_regression(chart.active_design().clone(), fit.theta_hat.clone(), data.meta.noise_sd);
    let cfg = SamplerConfig { seed, ..cfg.clone() };
    let chain = run_chain(&level, &data.y, &TargetKind::LikelihoodOverJacobian(spec.clone()), &cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let bridge = inner_density_mcmc_bridge(&chain, &level, &spec, &BridgeReference::ChainMoments, chain.len().max(1), &mut rng)?;
    let analytic = inner_density_analytic_affine(&level, &spec, 2000, &mut rng)?;
    Ok(ChainCheck {
        acceptance_rate: chain.acceptance_rate(),
        ess: ess(&chain.log_target),
        log_f_bridge: bridge.log_value,
        bridge_rel_se: bridge.std_err / bridge.value,
        log_f_analytic: analytic.log_value,
        bridge_status: bridge.status,
    })
}

/// Runs the path; a failing cell is recorded in its row and the other cells continue.
pub fn run_path(data: &Dataset, cfg: &PathConfig) -> Result<PathResult> {
    let lambdas = lambda_grid(cfg.lambda_min, cfg.lambda_max, cfg.grid_points)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Input(format!("thread pool: {e}")))?;
    pool.install(|| {
        let opts = cfg.complexity.lasso;
        let fits = fit_path(&data.x, &data.y, &lambdas, &opts);
        let cv = cv_errors(&data.x, &data.y, &lambdas, cfg.cv_folds, cfg.fold_seed, &opts)?;
        let (x_test, y_test) = data.draw_test_set(cfg.n_test, cfg.test_seed);
        let rows: Vec<PathRow> = fits
            .par_iter()
            .zip(lambdas.par_iter())
            .zip(cv.par_iter())
            .map(|((fit, &lambda), &cv_error)| {
                let fit = match fit {
                    Ok(f) => f,
                    Err(e) => {
                        return PathRow { lambda, record: None, cv_error, heldout_mse: f64::NAN, heldout_mse_se: f64::NAN, status: e.to_string(), chain_check: None }
                    }
                };
                let (heldout_mse, heldout_mse_se) = prediction_mse(&x_test, &y_test, &fit.beta);
                let (record, mut status) = match complexity_record(data, fit, &cfg.complexity) {
                    Ok(r) => (Some(r), "ok".to_string()),
                    Err(e) => (None, e.to_string()),
                };
                let chain_check = match &cfg.chain {
                    Some(sc) if record.is_some() && fit.k() > 0 && fit.k() < data.n() => {
                        match chain_check(data, fit, sc, opts, sc.seed ^ lambda.to_bits()) {
                            Ok(c) => Some(c),
                            Err(e) => {
                                status = format!("chain: {e}");
                                None
                            }
                        }
                    }
                    _ => None,
                };
                PathRow { lambda, record, cv_error, heldout_mse, heldout_mse_se, status, chain_check }
            })
            .collect();
        let selections = CRITERIA
            .iter()
            .filter_map(|name| {
                let best = rows
                    .iter()
                    .filter_map(|r| criterion_value(r, name).filter(|v| v.is_finite()).map(|v| (v, r)))
                    .min_by(|a, b| a.0.total_cmp(&b.0))?;
                Some(Selection { criterion: name.to_string(), lambda: best.1.lambda, heldout_mse: best.1.heldout_mse, heldout_mse_se: best.1.heldout_mse_se })
            })
            .collect();
        Ok(PathResult { rows, selections, meta: data.meta.clone() })
    })
}

impl PathResult {
    pub fn selection(&self, criterion: &str) -> Option<&Selection> {
        self.selections.iter().find(|s| s.criterion == criterion)
    }

    /// Writes `lambda,cv_error,heldout_mse,heldout_mse_se`.
    pub fn write_errors_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["lambda", "cv_error", "heldout_mse", "heldout_mse_se"])?;
        for row in &self.rows {
            w.write_record([row.lambda, row.cv_error, row.heldout_mse, row.heldout_mse_se].map(|v| format!("{v}")))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `lambda,k,log_complexity,se,nll_fit,codelength,bic,aic,asymptotic_nml,status`.
    pub fn write_path_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["lambda", "k", "log_complexity", "se", "nll_fit", "codelength", "bic", "aic", "asymptotic_nml", "status"])?;
        for row in &self.rows {
            let mut rec = vec![format!("{}", row.lambda)];
            match &row.record {
                Some(r) => rec.extend([
                    r.k.to_string(),
                    format!("{}", r.log_complexity),
                    format!("{}", r.log_complexity_se),
                    format!("{}", r.nll_fit),
                    format!("{}", r.codelength),
                    format!("{}", r.bic),
                    format!("{}", r.aic),
                    format!("{}", r.asymptotic_nml),
                ]),
                None => rec.extend(std::iter::once(String::new()).chain(std::iter::repeat("NaN".to_string()).take(7))),
            }
            rec.push(row.status.clone());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `criterion,selected_lambda,heldout_mse`.
    pub fn write_selection_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["criterion", "selected_lambda", "heldout_mse"])?;
        for s in &self.selections {
            w.write_record([s.criterion.clone(), format!("{}", s.lambda), format!("{}", s.heldout_mse)])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `lambda,acceptance_rate,ess,log_f_bridge,bridge_rel_se,log_f_analytic,bridge_status`.
    pub fn write_chain_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["lambda", "acceptance_rate", "ess", "log_f_bridge", "bridge_rel_se", "log_f_analytic", "bridge_status"])?;
        for row in &self.rows {
            if let Some(c) = &row.chain_check {
                w.write_record([
                    format!("{}", row.lambda),
                    format!("{}", c.acceptance_rate),
                    format!("{}", c.ess),
                    format!("{}", c.log_f_bridge),
                    format!("{}", c.bridge_rel_se),
                    format!("{}", c.log_f_analytic),
                    format!("{:?}", c.bridge_status),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gen_toeplitz_data;

    #[test]
    fn grid_is_increasing_and_hits_the_endpoints() {
        let g = lambda_grid(0.05, 100.0, 120).unwrap();
        assert_eq!(g.len(), 120);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert!((g[0] - 0.05).abs() < 1e-15 && (g[119] - 100.0).abs() < 1e-12);
        assert_eq!(lambda_grid(0.1, 1.0, 1).unwrap(), vec![0.1]);
        assert!(lambda_grid(1.0, 0.1, 5).is_err());
    }

    #[test]
    fn small_path_produces_finite_rows_and_selections() {
        let data = gen_toeplitz_data(50, 20, 0.5, 3.0, &[2.0, -1.5, 1.0], 7).unwrap();
        let lmax = crate::model::lambda_max(&data.x, &data.y);
        let cfg = PathConfig { lambda_min: 0.02 * lmax, lambda_max: lmax, grid_points: 12, n_test: 200, ..Default::default() };
        let res = run_path(&data, &cfg).unwrap();
        assert_eq!(res.rows.len(), 12);
        for row in &res.rows {
            assert_eq!(row.status, "ok");
            let r = row.record.as_ref().unwrap();
            assert!(r.codelength.is_finite());
            assert_eq!(r.codelength, r.nll_fit + r.log_complexity);
        }
        assert_eq!(res.selections.len(), CRITERIA.len());
        let dir = tempfile::tempdir().unwrap();
        res.write_path_csv(&dir.path().join("path.csv")).unwrap();
        res.write_selection_csv(&dir.path().join("sel.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("path.csv")).unwrap();
        assert!(text.starts_with("lambda,k,log_complexity,se,nll_fit,codelength,bic,aic,asymptotic_nml"));
    }

    #[test]
    fn chain_checks_agree_with_closed_form() {
        let data = gen_toeplitz_data(12, 6, 0.3, 4.0, &[2.0, -1.5], 9).unwrap();
        let lmax = crate::model::lambda_max(&data.x, &data.y);
        let chain = SamplerConfig { n_samples: 30_000, burn_in: 1000, step_scale: Some(0.5 * data.meta.noise_sd), ..Default::default() };
        let cfg = PathConfig { lambda_min: 0.2 * lmax, lambda_max: 0.5 * lmax, grid_points: 2, n_test: 100, cv_folds: 3, chain: Some(chain), ..Default::default() };
        let res = run_path(&data, &cfg).unwrap();
        for row in &res.rows {
            let c = row.chain_check.as_ref().expect("chain ran");
            let diff = (c.log_f_bridge - c.log_f_analytic).abs();
            assert!(diff < 4.0 * c.bridge_rel_se + 0.05, "{row:?}");
        }
    }
}
