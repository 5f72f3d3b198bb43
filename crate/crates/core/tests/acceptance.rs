//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line with its measured
//! value, the pinned tolerance and its wall time against a runtime budget.

use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use pdlnml::diagnostics::{batch_means_se, scaling_benchmark, tolerance_bias_study, ScalingGridSpec};
use pdlnml::model::{
    gen_toeplitz_data, jacobian_factor, lasso_fit, lasso_jacobian, lambda_max, AffineConstraint, ConservativeJacobian,
    JacobianSource, LassoChart, LassoOptions, LikelihoodSpec, PdlMap, SoftThresholdMean, SphereConstraint,
};
use pdlnml::nml::{
    bias_diagnostic, inner_density_ambient_is_extrapolated, inner_density_analytic_affine, inner_density_mcmc_bridge,
    inner_density_thickened, run_path, slope_study, BridgeReference, DensityEstimate, IsProposal, PathConfig, SjoPolicy,
    SlopeStudyConfig,
};
use pdlnml::oracle::{sjo_gs, OracleConfig, OracleRadius, SelectionPolicy};
use pdlnml::projection::{lasso_affine_projection, project_newton, ProjectionConfig, SolverChoice};
use pdlnml::sampler::{init_state, ppmh_step_with, run_chain, ReverseMode, SamplerConfig, TargetKind};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn normal_vec(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

fn same_piece(a: &pdlnml::model::EstimatorResult, b: &pdlnml::model::EstimatorResult) -> bool {
    a.active_set == b.active_set && a.signs == b.signs
}

/// Analytic Jacobians of both estimators against central differences at smooth points.
fn jacobian_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let opts = LassoOptions { tol: 1e-13, ..Default::default() };
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut lasso_points = 0;
    while lasso_points < 500 {
        let data = gen_toeplitz_data(12, 8, 0.5, 3.0, &[2.0, -1.5, 1.0], rng.gen()).unwrap();
        let y = &data.y + normal_vec(12, &mut rng) * 0.1;
        let lambda = rng.gen_range(0.05..0.5) * lambda_max(&data.x, &y);
        let fit = lasso_fit(&data.x, &y, lambda, &opts).unwrap();
        if fit.k() == 0 {
            continue;
        }
        let g = lasso_jacobian(&data.x, &fit, &opts).unwrap().matrix;
        let mut fd = DMatrix::zeros(fit.k(), 12);
        let mut smooth = true;
        for i in 0..12 {
            let mut up = y.clone();
            up[i] += h;
            let mut dn = y.clone();
            dn[i] -= h;
            let (a, b) = (lasso_fit(&data.x, &up, lambda, &opts).unwrap(), lasso_fit(&data.x, &dn, lambda, &opts).unwrap());
            if !same_piece(&a, &fit) || !same_piece(&b, &fit) {
                smooth = false;
                break;
            }
            fd.set_column(i, &((a.theta_hat - b.theta_hat) / (2.0 * h)));
        }
        if !smooth {
            continue;
        }
        worst = worst.max((&fd - &g).amax() / g.amax());
        lasso_points += 1;
    }
    let mut toy_points = 0;
    while toy_points < 500 {
        let n = rng.gen_range(2..10);
        let toy = SoftThresholdMean::new(n, rng.gen_range(0.1..1.0)).unwrap();
        let x = normal_vec(n, &mut rng) * 2.0;
        if (toy.mean(&x).abs() - toy.lambda).abs() < 10.0 * h || toy.mean(&x).abs() < toy.lambda {
            continue;
        }
        let (g, _) = toy.piece_jacobian(&x).unwrap();
        let fd = DMatrix::from_fn(1, n, |_, i| {
            let mut up = x.clone();
            up[i] += h;
            let mut dn = x.clone();
            dn[i] -= h;
            (toy.estimate(&up) - toy.estimate(&dn)) / (2.0 * h)
        });
        worst = worst.max((&fd - &g).amax() / g.amax());
        toy_points += 1;
    }
    outcome(worst < 1e-5, format!("max rel err {worst:.2e} < 1e-5 over {lasso_points} Lasso + {toy_points} toy smooth points"))
}

/// `sqrt(det(G G^T))` by Cholesky against the singular-value product.
fn jacobian_factor_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.gen_range(1..6);
        let n = rng.gen_range(k..12);
        let g: DMatrix<f64> = DMatrix::from_fn(k, n, |_, _| StandardNormal.sample(&mut rng));
        let chol = (&g * g.transpose()).cholesky().unwrap();
        let via_det = chol.l().diagonal().iter().product::<f64>();
        let via_svd = jacobian_factor(&ConservativeJacobian::new(g, JacobianSource::Frechet)).unwrap();
        worst = worst.max((via_svd / via_det - 1.0).abs());
    }
    outcome(worst < 1e-10, format!("max rel diff {worst:.2e} < 1e-10 over 1000 matrices"))
}

/// Newton against the closed-form affine projection, and Newton residual decay on a sphere.
fn projection_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = ProjectionConfig { eps_feas: 1e-12, solver: SolverChoice::NewtonOnly, ..Default::default() };
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    while instances < 500 {
        let n = rng.gen_range(6..20);
        let data = gen_toeplitz_data(n, 6, 0.4, 3.0, &[1.5, -1.0], rng.gen()).unwrap();
        let fit = lasso_fit(&data.x, &data.y, 0.2 * lambda_max(&data.x, &data.y), &LassoOptions::default()).unwrap();
        if fit.k() == 0 {
            continue;
        }
        let chart = Arc::new(LassoChart::from_fit(Arc::clone(&data.x), &fit, LassoOptions::default()).unwrap());
        let level = chart.level_set(fit.theta_hat.clone()).unwrap();
        let y0 = &data.y + normal_vec(n, &mut rng);
        let closed = lasso_affine_projection(&level, &y0, &cfg);
        let newton = project_newton(&level, &y0, &cfg);
        worst = worst.max((closed.x_star - newton.x_star).amax());
        instances += 1;
    }
    let sphere = SphereConstraint::new(6, 1.5).unwrap();
    let trace_cfg = ProjectionConfig { record_trace: true, eps_feas: 1e-14, ..cfg };
    let res = project_newton(&sphere, &DVector::from_vec(vec![0.5, 2.0, -1.0, 0.3, 0.8, -0.1]), &trace_cfg);
    let feas: Vec<f64> = res.trace.iter().map(|t| t.feas_residual).filter(|f| *f > 1e-15).collect();
    let ratios: Vec<f64> = feas.windows(2).map(|w| w[1] / w[0]).collect();
    let superlinear = ratios.len() >= 2 && ratios.windows(2).all(|w| w[1] < w[0]) && *ratios.last().unwrap() < 0.05;
    let pass = worst < 1e-8 && superlinear && res.converged();
    let ratio_text: Vec<String> = ratios.iter().map(|r| format!("{r:.1e}")).collect();
    outcome(pass, format!("max |newton - closed| {worst:.2e} < 1e-8 over {instances} instances; sphere residual ratios [{}] decreasing, last < 5e-2", ratio_text.join(", ")))
}

/// Restricted-Gaussian chain moments on a plane and forward/reverse volume-factor replay on a sphere.
fn sampler_correctness() -> Outcome {
    // Plane {x : a^T x = 1} in R^4; target N(m, I) restricted to the plane.
    let a = DMatrix::from_row_slice(1, 4, &[1.0, 2.0, -1.0, 0.5]);
    let level = AffineConstraint::new(a.clone(), DVector::from_element(1, 1.0)).unwrap();
    let m = DVector::from_vec(vec![0.5, -1.0, 2.0, 0.0]);
    let target = {
        let m = m.clone();
        move |x: &DVector<f64>| -0.5 * (x - &m).norm_squared()
    };
    let (x_cond, _) = pdlnml::model::LevelSet::affine_projection(&level, &m).unwrap();
    let proj = level.tangent_projector();
    let basis = pdlnml::linalg::null_space(&a).unwrap();
    let cfg = SamplerConfig { n_samples: 21_000, burn_in: 1000, step_scale: Some(1.2), seed: 4, ..Default::default() };
    let chain = run_chain(&level, &x_cond, &target, &cfg).unwrap();
    let coords: Vec<DVector<f64>> = chain.samples.iter().map(|s| basis.tr_mul(&(s - &x_cond))).collect();
    let want_cov = basis.transpose() * &proj * &basis;
    let d = basis.ncols();
    let mut worst_z: f64 = 0.0;
    for i in 0..d {
        let series: Vec<f64> = coords.iter().map(|c| c[i]).collect();
        let mean = series.iter().sum::<f64>() / series.len() as f64;
        worst_z = worst_z.max(mean.abs() / batch_means_se(&series));
        for j in i..d {
            let prod: Vec<f64> = coords.iter().map(|c| c[i] * c[j]).collect();
            let cov = prod.iter().sum::<f64>() / prod.len() as f64;
            worst_z = worst_z.max((cov - want_cov[(i, j)]).abs() / batch_means_se(&prod));
        }
    }

    let sphere = SphereConstraint::new(5, 1.0).unwrap();
    let rcfg = SamplerConfig {
        reverse: ReverseMode::Symmetric,
        oracle: OracleConfig { radius: OracleRadius::Absolute(1e-13), num_samples: 1, policy: SelectionPolicy::RandomElement },
        projection: ProjectionConfig { eps_feas: 1e-13, ..Default::default() },
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut state = init_state(&sphere, DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0, 0.0]), &TargetKind::HausdorffUniform, &rcfg, &mut rng).unwrap();
    let mut worst_replay: f64 = 0.0;
    let mut replays = 0;
    for _ in 0..400 {
        let v = normal_vec(4, &mut rng);
        let (next, info) = ppmh_step_with(&state, &sphere, &TargetKind::HausdorffUniform, 0.4, v, &rcfg, &mut rng);
        if let (Some(prop), Some(v_rev)) = (info.proposal.clone(), info.v_rev.clone()) {
            let (_, back) = ppmh_step_with(&prop, &sphere, &TargetKind::HausdorffUniform, 0.4, v_rev, &rcfg, &mut rng);
            if let Some(back_state) = back.proposal {
                let err = (back_state.x - &state.x)
                    .amax()
                    .max((back.log_j_fwd - info.log_j_rev).abs())
                    .max((back.log_j_rev - info.log_j_fwd).abs());
                worst_replay = worst_replay.max(err);
                replays += 1;
            }
        }
        state = next;
    }
    let pass = worst_z < 3.0 && worst_replay < 1e-6 && replays >= 300;
    outcome(
        pass,
        format!("max |moment error| {worst_z:.2} SE < 3 at n = 2e4 (accept {:.2}); replay max err {worst_replay:.2e} < 1e-6 over {replays} moves", chain.acceptance_rate()),
    )
}

/// Analytic, ambient-IS, thickened and bridge estimates of f(theta') on N = 3, P = 2, k = 1.
fn oracle_triangle() -> Outcome {
    let x = DMatrix::from_row_slice(3, 2, &[0.8, 0.3, 0.5, -0.7, 0.33, 0.65]);
    let x = Arc::new(DMatrix::from_columns(&[x.column(0).normalize(), x.column(1).normalize()]));
    let y = DVector::from_vec(vec![1.2, 0.9, 0.4]);
    let opts = LassoOptions::default();
    let lambda = 0.5 * lambda_max(&x, &y);
    let fit = lasso_fit(&x, &y, lambda, &opts).unwrap();
    assert_eq!(fit.k(), 1, "instance must have one active coefficient");
    let chart = Arc::new(LassoChart::from_fit(Arc::clone(&x), &fit, opts).unwrap());
    let level = chart.level_set(fit.theta_hat.clone()).unwrap();
    let sigma = 0.5;
    let spec = LikelihoodSpec::gaussian_regression(chart.active_design().clone(), fit.theta_hat.clone(), sigma);
    let mut rng = ChaCha8Rng::seed_from_u64(6);

    let analytic = inner_density_analytic_affine(&level, &spec, 200_000, &mut rng).unwrap();
    let ambient =
        inner_density_ambient_is_extrapolated(chart.as_ref(), &fit.theta_hat, &spec, &[0.01, 0.02, 0.04], 400_000, &IsProposal::Likelihood, &mut rng)
            .unwrap();
    let thick = inner_density_thickened(chart.as_ref(), &level, &spec, 2e-3, 400_000, &mut rng).unwrap();
    let cfg = SamplerConfig { n_samples: 42_000, burn_in: 2000, step_scale: Some(0.5 * sigma), seed: 7, ..Default::default() };
    let chain = run_chain(&level, &y, &TargetKind::LikelihoodOverJacobian(spec.clone()), &cfg).unwrap();
    let bridge = inner_density_mcmc_bridge(&chain, &level, &spec, &BridgeReference::ChainMoments, 40_000, &mut rng).unwrap();

    let all: [(&str, &DensityEstimate); 4] = [("analytic", &analytic), ("ambient", &ambient), ("thickened", &thick), ("bridge", &bridge)];
    let mut worst_z: f64 = 0.0;
    let mut worst_rel: f64 = 0.0;
    for i in 0..4 {
        for j in i + 1..4 {
            let (a, b) = (all[i].1, all[j].1);
            let se = (a.std_err.powi(2) + b.std_err.powi(2)).sqrt();
            worst_z = worst_z.max((a.value - b.value).abs() / se);
            worst_rel = worst_rel.max((a.value / b.value - 1.0).abs());
        }
    }
    let values: Vec<String> = all.iter().map(|(n, e)| format!("{n} {:.4}+-{:.4}", e.value, e.std_err)).collect();
    outcome(worst_z < 3.0, format!("max pairwise gap {worst_z:.2} combined SE < 3 (max rel {worst_rel:.3}, target 0.05); {}", values.join(", ")))
}

/// Slope of ln C on ln N at k = 2 and flatness of the residuals ln C - (k/2) ln N.
fn asymptotic_slope() -> Outcome {
    let study = slope_study(&SlopeStudyConfig { seed: 8, ..Default::default() }).unwrap();
    let half_k = 0.5 * study.fit.k as f64;
    let slope_ok = (study.fit.slope / half_k - 1.0).abs() < 0.15;
    // Residual trend: the weighted slope of the residuals is weighted_slope - k/2.
    let trend = study.weighted_slope - half_k;
    let flat_ok = trend.abs() <= 2.0 * study.weighted_slope_se;
    let residuals: Vec<String> = study.rows.iter().map(|r| format!("N={} {:.3}+-{:.3}", r.n, r.residual, r.se_log_complexity)).collect();
    outcome(
        slope_ok && flat_ok,
        format!(
            "slope {:.3} within 15% of {half_k}; residual trend {trend:.4} within 2 SE ({:.4}); residuals [{}]",
            study.fit.slope,
            2.0 * study.weighted_slope_se,
            residuals.join(", ")
        ),
    )
}

/// Step-time exponent in N and flatness in P.
fn scaling() -> Outcome {
    let report = scaling_benchmark(&ScalingGridSpec::default(), 500, 20, &SamplerConfig::default(), &TargetKind::HausdorffUniform).unwrap();
    let exponent = report.fitted_exponent_vs_n.unwrap();
    let ratio = report.dimension_invariance_ratio.unwrap();
    let times: Vec<String> = report.grid.iter().map(|c| format!("({},{}) {:.2}ms", c.n, c.p, 1e3 * c.mean_step_seconds)).collect();
    outcome(
        (2.5..=3.5).contains(&exponent) && ratio < 1.2,
        format!("exponent {exponent:.2} in [2.5, 3.5]; P-sweep max/min {ratio:.3} < 1.2; cells {}", times.join(" ")),
    )
}

/// Deviation of a sphere functional against a 1e-9 reference tolerance.
fn tolerance_bias() -> Outcome {
    let level = SphereConstraint::new(5, 1.0).unwrap();
    let x0 = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0, 0.0]);
    let cfg = SamplerConfig { n_samples: 20_000, burn_in: 500, step_scale: Some(0.3), seed: 9, ..Default::default() };
    let study = tolerance_bias_study(&level, &x0, &TargetKind::HausdorffUniform, &[1e-4, 1e-5, 1e-6, 1e-9], |x| x.norm_squared(), &cfg, 100.0).unwrap();
    let above: Vec<_> = study.rows.iter().filter(|r| r.deviation > 2.0 * r.noise_se).collect();
    let fit_ok = above.is_empty() || study.fitted_c.is_some_and(|c| c.is_finite() && c > 0.0);
    let rows: Vec<String> = study.rows.iter().map(|r| format!("eps {:.0e}: {:.2e} (noise {:.1e})", r.eps, r.deviation, r.noise_se)).collect();
    outcome(
        study.monotone && fit_ok && !study.underpowered,
        format!("monotone {}; c = {:?} over {} rows above noise; {}", study.monotone, study.fitted_c, above.len(), rows.join(", ")),
    )
}

/// Piece-selection frequency of the random-element oracle at the toy kink.
fn sjo_kink() -> Outcome {
    let toy = SoftThresholdMean::new(4, 0.5).unwrap();
    // mean(x) = lambda exactly: half of every ball lies on each side of the kink.
    let x = DVector::from_vec(vec![0.2, 0.9, 0.4, 0.5]);
    let cfg = OracleConfig { radius: OracleRadius::Absolute(0.1), num_samples: 5, policy: SelectionPolicy::RandomElement };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let draws = 10_000;
    let mut active = 0;
    for _ in 0..draws {
        // All-dead-band draws are oracle failures; they count as dead-band selections.
        if let Ok(out) = sjo_gs(&toy, &x, &cfg, &mut rng) {
            if out.selected_piece() == Some(1) {
                active += 1;
            }
        }
    }
    let freq = active as f64 / draws as f64;
    let half_width = 2.5758 * (0.25 / draws as f64).sqrt();
    outcome((freq - 0.5).abs() <= half_width, format!("active-piece frequency {freq:.4}, 99% CI half-width {half_width:.4} around 0.5"))
}

/// NML against cross-validation on the desk replica, and the bias diagnostic.
fn selection_parity() -> Outcome {
    let data = gen_toeplitz_data(100, 200, 0.5, 3.0, &[3.0, -2.0, 2.0, -1.0, 1.0], 11).unwrap();
    let result = run_path(&data, &PathConfig::default()).unwrap();
    let pick = |name: &str| result.selections.iter().find(|s| s.criterion == name).unwrap().clone();
    let (nml, cv) = (pick("nml"), pick("cv"));
    let parity = (nml.heldout_mse - cv.heldout_mse).abs() <= 1.96 * cv.heldout_mse_se;

    let toy = SoftThresholdMean::new(3, 0.3).unwrap();
    let spec = LikelihoodSpec::gaussian_scalar(0.3, 1.0);
    let theta = DVector::from_element(1, 0.1);
    let mean_cfg = OracleConfig { policy: SelectionPolicy::MeanElement, ..Default::default() };
    let honest_mean = SjoPolicy { map: &toy, cfg: mean_cfg };
    let honest_random = SjoPolicy { map: &toy, cfg: OracleConfig::default() };
    let corrupt = |x: &DVector<f64>, rng: &mut ChaCha8Rng| {
        let mut j = sjo_gs(&toy, x, &mean_cfg, rng)?.jacobian;
        let m = toy.mean(x);
        if m > 0.3 && m < 0.6 {
            j.matrix *= 0.5;
        }
        Ok(j)
    };
    let planted = bias_diagnostic(&toy, &theta, &spec, &corrupt, &honest_mean, 0.05, 20_000, 12).unwrap();
    let honest = bias_diagnostic(&toy, &theta, &spec, &honest_random, &honest_mean, 0.05, 20_000, 13).unwrap();
    let planted_z = planted.difference / planted.combined_se;
    let honest_z = honest.difference / honest.combined_se;
    outcome(
        parity && planted_z > 5.0 && honest_z.abs() < 3.0,
        format!(
            "held-out MSE nml {:.4} (lambda {:.3}) vs cv {:.4}+-{:.4} (lambda {:.3}), 95% CI; planted bias {planted_z:.1} SE > 5; honest {honest_z:.2} SE within 3",
            nml.heldout_mse,
            nml.lambda,
            cv.heldout_mse,
            1.96 * cv.heldout_mse_se,
            cv.lambda
        ),
    )
}

#[test]
fn acceptance() {
    type Check = fn() -> Outcome;
    let checks: [(&str, Check, u64); 10] = [
        ("jacobian_consistency", jacobian_consistency, 60),
        ("jacobian_factor_identity", jacobian_factor_identity, 10),
        ("projection_exactness", projection_exactness, 60),
        ("sampler_correctness", sampler_correctness, 300),
        ("oracle_triangle", oracle_triangle, 600),
        ("asymptotic_slope", asymptotic_slope, 1800),
        ("scaling", scaling, 900),
        ("tolerance_bias", tolerance_bias, 600),
        ("sjo_kink_statistics", sjo_kink, 10),
        ("selection_parity", selection_parity, 1800),
    ];
    let mut failed = Vec::new();
    for (i, (name, check, budget)) in checks.iter().enumerate() {
        let clock = Instant::now();
        let out = check();
        let elapsed = clock.elapsed();
        let in_time = elapsed <= Duration::from_secs(*budget);
        let pass = out.pass && in_time;
        println!(
            "[{}] {:>2} {name}: {} ({:.1}s, budget {budget}s)",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            out.detail,
            elapsed.as_secs_f64()
        );
        if !pass {
            failed.push(*name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
