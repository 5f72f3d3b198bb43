//! Euclidean projection onto estimator level sets and its derivative.
//!
//! The projection solves `min |x - y0|^2 / 2` subject to `m(x) = theta'` through the
//! stationarity system `x - y0 + M(x)^T mu = 0`, `m(x) - theta' = 0`. Solvers are tried in
//! order: closed form on affine pieces, semismooth Newton, augmented Lagrangian.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::SymmetricIndefinite;
use crate::model::{LassoLevelSet, LevelSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionMethod {
    AffineClosedForm,
    Newton,
    Alm,
}

impl fmt::Display for ProjectionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AffineClosedForm => "affine_closed_form",
            Self::Newton => "newton",
            Self::Alm => "alm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionStatus {
    Converged,
    InfeasibleRegion,
    MaxIter,
    SingularKkt,
}

impl fmt::Display for ProjectionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Converged => "converged",
            Self::InfeasibleRegion => "infeasible_region",
            Self::MaxIter => "max_iter",
            Self::SingularKkt => "singular_kkt",
        })
    }
}

/// Which solvers `project` may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverChoice {
    /// Closed form when available, then Newton, then the augmented Lagrangian.
    Auto,
    NewtonOnly,
    AlmOnly,
}

#[derive(Debug, Clone, Copy)]
pub struct ProjectionConfig {
    /// Feasibility tolerance on `|m(x) - theta'|`.
    pub eps_feas: f64,
    pub max_newton_iter: usize,
    pub max_alm_iter: usize,
    /// Initial augmented-Lagrangian penalty.
    pub alm_rho0: f64,
    /// Largest admissible KKT condition estimate.
    pub cond_cap: f64,
    pub solver: SolverChoice,
    pub record_trace: bool,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            eps_feas: 1e-9,
            max_newton_iter: 50,
            max_alm_iter: 500,
            alm_rho0: 10.0,
            cond_cap: 1e12,
            solver: SolverChoice::Auto,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub iteration: usize,
    pub method: ProjectionMethod,
    pub feas_residual: f64,
    pub stat_residual: f64,
}

#[derive(Debug, Clone)]
pub struct ProjectionResult {
    pub x_star: DVector<f64>,
    pub multipliers: DVector<f64>,
    pub feas_residual: f64,
    pub stat_residual: f64,
    pub iterations: usize,
    pub method: ProjectionMethod,
    pub status: ProjectionStatus,
    pub trace: Vec<TraceRow>,
}

impl ProjectionResult {
    pub fn converged(&self) -> bool {
        self.status == ProjectionStatus::Converged
    }
}

fn stationarity<L: LevelSet + ?Sized>(level: &L, x: &DVector<f64>, y0: &DVector<f64>, mu: &DVector<f64>) -> DVector<f64> {
    x - y0 + level.constraint_jacobian(x).tr_mul(mu)
}

fn finish<L: LevelSet + ?Sized>(level: &L, mut res: ProjectionResult) -> ProjectionResult {
    if res.converged() && !level.in_region(&res.x_star) {
        res.status = ProjectionStatus::InfeasibleRegion;
    }
    res
}

/// Closed-form projection onto an affine level set, `None` if the level set is not affine.
pub fn project_affine<L: LevelSet + ?Sized>(level: &L, y0: &DVector<f64>, cfg: &ProjectionConfig) -> Option<ProjectionResult> {
    let k = level.target().len();
    let initial = level.residual(y0).norm();
    if initial <= cfg.eps_feas {
        if level.affine_projection(y0).is_none() {
            return None;
        }
        let res = ProjectionResult {
            x_star: y0.clone(),
            multipliers: DVector::zeros(k),
            feas_residual: initial,
            stat_residual: 0.0,
            iterations: 0,
            method: ProjectionMethod::AffineClosedForm,
            status: ProjectionStatus::Converged,
            trace: Vec::new(),
        };
        return Some(finish(level, res));
    }
    let (x, mu) = level.affine_projection(y0)?;
    let feas = level.residual(&x).norm();
    let stat = stationarity(level, &x, y0, &mu).norm();
    let status = if feas <= cfg.eps_feas && stat <= 10.0 * cfg.eps_feas {
        ProjectionStatus::Converged
    } else {
        ProjectionStatus::MaxIter
    };
    let trace = if cfg.record_trace {
        vec![TraceRow { iteration: 1, method: ProjectionMethod::AffineClosedForm, feas_residual: feas, stat_residual: stat }]
    } else {
        Vec::new()
    };
    let res = ProjectionResult {
        x_star: x,
        multipliers: mu,
        feas_residual: feas,
        stat_residual: stat,
        iterations: 1,
        method: ProjectionMethod::AffineClosedForm,
        status,
        trace,
    };
    Some(finish(level, res))
}

/// Closed-form projection onto a Lasso level set with active-set drift detection.
pub fn lasso_affine_projection(level: &LassoLevelSet, y0: &DVector<f64>, cfg: &ProjectionConfig) -> ProjectionResult {
    project_affine(level, y0, cfg).expect("Lasso level sets are affine")
}

/// The (N + k) square KKT matrix `[[I + sum mu_i H_i, M^T], [M, 0]]` at `(x, mu)`.
pub fn kkt_matrix<L: LevelSet + ?Sized>(level: &L, x: &DVector<f64>, mu: &DVector<f64>) -> DMatrix<f64> {
    let n = x.len();
    let m = level.constraint_jacobian(x);
    let k = m.nrows();
    let mut kkt = DMatrix::zeros(n + k, n + k);
    match level.curvature(x, mu) {
        Some(h) => {
            let mut top = kkt.view_mut((0, 0), (n, n));
            top.copy_from(&h);
            for i in 0..n {
                top[(i, i)] += 1.0;
            }
        }
        None => kkt.view_mut((0, 0), (n, n)).fill_with_identity(),
    }
    kkt.view_mut((n, 0), (k, n)).copy_from(&m);
    kkt.view_mut((0, n), (n, k)).copy_from(&m.transpose());
    kkt
}

fn factor_checked(kkt: &DMatrix<f64>, cond_cap: f64) -> Result<SymmetricIndefinite> {
    let f = SymmetricIndefinite::factor(kkt)?;
    let cond = f.condition_estimate();
    if !(cond <= cond_cap) {
        return Err(Error::Singular(format!("KKT condition estimate {cond:.3e} exceeds cap {cond_cap:.1e}")));
    }
    Ok(f)
}

/// Semismooth Newton on the stationarity system, started at `(y0, 0)`.
pub fn project_newton<L: LevelSet + ?Sized>(level: &L, y0: &DVector<f64>, cfg: &ProjectionConfig) -> ProjectionResult {
    let n = y0.len();
    let k = level.target().len();
    let mut x = y0.clone();
    let mut mu = DVector::zeros(k);
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut status = ProjectionStatus::MaxIter;
    let (mut feas, mut stat);
    loop {
        let c = level.residual(&x);
        let s = stationarity(level, &x, y0, &mu);
        feas = c.norm();
        stat = s.norm();
        if cfg.record_trace {
            trace.push(TraceRow { iteration: iterations, method: ProjectionMethod::Newton, feas_residual: feas, stat_residual: stat });
        }
        if feas <= cfg.eps_feas && stat <= cfg.eps_feas {
            status = ProjectionStatus::Converged;
            break;
        }
        if iterations >= cfg.max_newton_iter || !feas.is_finite() || !stat.is_finite() {
            break;
        }
        let kkt = kkt_matrix(level, &x, &mu);
        let f = match factor_checked(&kkt, cfg.cond_cap) {
            Ok(f) => f,
            Err(_) => {
                status = ProjectionStatus::SingularKkt;
                break;
            }
        };
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-s));
        rhs.rows_mut(n, k).copy_from(&(-c));
        let step = f.solve_vec(&rhs);
        x += step.rows(0, n);
        mu += step.rows(n, k);
        iterations += 1;
    }
    finish(
        level,
        ProjectionResult { x_star: x, multipliers: mu, feas_residual: feas, stat_residual: stat, iterations, method: ProjectionMethod::Newton, status, trace },
    )
}

/// Minimizes the augmented Lagrangian in `x` for fixed `(lam, rho)` by damped Newton steps.
fn alm_inner<L: LevelSet + ?Sized>(level: &L, y0: &DVector<f64>, x: &mut DVector<f64>, lam: &DVector<f64>, rho: f64, tol: f64) {
    let merit = |x: &DVector<f64>| {
        let c = level.residual(x);
        0.5 * (x - y0).norm_squared() + lam.dot(&c) + 0.5 * rho * c.norm_squared()
    };
    for _ in 0..50 {
        let c = level.residual(x);
        let m = level.constraint_jacobian(x);
        let w = lam + rho * &c;
        let grad = &*x - y0 + m.tr_mul(&w);
        if grad.norm() <= tol {
            return;
        }
        let mut hess = m.tr_mul(&m) * rho;
        for i in 0..hess.nrows() {
            hess[(i, i)] += 1.0;
        }
        if let Some(h) = level.curvature(x, &w) {
            hess += h;
        }
        let step = match SymmetricIndefinite::factor(&hess) {
            Ok(f) => f.solve_vec(&(-&grad)),
            Err(_) => -grad.clone(),
        };
        let f0 = merit(x);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let trial = &*x + t * &step;
            if merit(&trial) <= f0 {
                *x = trial;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            return;
        }
    }
}

/// Augmented Lagrangian with multiplier updates `lam += rho c` and penalty doubling on stalls.
pub fn project_alm<L: LevelSet + ?Sized>(level: &L, y0: &DVector<f64>, cfg: &ProjectionConfig) -> ProjectionResult {
    let k = level.target().len();
    let mut x = y0.clone();
    let mut lam = DVector::zeros(k);
    let mut rho = cfg.alm_rho0;
    let mut trace = Vec::new();
    let mut feas = level.residual(&x).norm();
    let mut stat = 0.0;
    if cfg.record_trace {
        trace.push(TraceRow { iteration: 0, method: ProjectionMethod::Alm, feas_residual: feas, stat_residual: stat });
    }
    let mut iterations = 0;
    let mut status = if feas <= cfg.eps_feas { ProjectionStatus::Converged } else { ProjectionStatus::MaxIter };
    while status != ProjectionStatus::Converged && iterations < cfg.max_alm_iter {
        iterations += 1;
        let inner_tol = 1e-13 * (1.0 + y0.norm());
        alm_inner(level, y0, &mut x, &lam, rho, inner_tol);
        let c = level.residual(&x);
        lam += rho * &c;
        let new_feas = c.norm();
        if new_feas > 0.25 * feas {
            rho *= 2.0;
        }
        feas = new_feas;
        stat = stationarity(level, &x, y0, &lam).norm();
        if cfg.record_trace {
            trace.push(TraceRow { iteration: iterations, method: ProjectionMethod::Alm, feas_residual: feas, stat_residual: stat });
        }
        if !feas.is_finite() {
            break;
        }
        if feas <= cfg.eps_feas && stat <= 10.0 * cfg.eps_feas {
            status = ProjectionStatus::Converged;
        }
    }
    finish(
        level,
        ProjectionResult { x_star: x, multipliers: lam, feas_residual: feas, stat_residual: stat, iterations, method: ProjectionMethod::Alm, status, trace },
    )
}

/// Projects `y0` with the solver chain selected by `cfg.solver`.
pub fn project<L: LevelSet + ?Sized>(level: &L, y0: &DVector<f64>, cfg: &ProjectionConfig) -> ProjectionResult {
    match cfg.solver {
        SolverChoice::NewtonOnly => project_newton(level, y0, cfg),
        SolverChoice::AlmOnly => project_alm(level, y0, cfg),
        SolverChoice::Auto => {
            if let Some(res) = project_affine(level, y0, cfg) {
                if matches!(res.status, ProjectionStatus::Converged | ProjectionStatus::InfeasibleRegion) {
                    return res;
                }
            }
            let res = project_newton(level, y0, cfg);
            match res.status {
                ProjectionStatus::Converged | ProjectionStatus::InfeasibleRegion => res,
                _ => {
                    let mut alm = project_alm(level, y0, cfg);
                    let mut trace = res.trace;
                    trace.append(&mut alm.trace);
                    alm.trace = trace;
                    alm
                }
            }
        }
    }
}

/// Derivative `dP/dy0` (N x N) at a converged projection, from the KKT system
/// `[[H, M^T], [M, 0]] [dP; dmu] = [I; 0]`.
pub fn projection_jacobian<L: LevelSet + ?Sized>(level: &L, res: &ProjectionResult, cfg: &ProjectionConfig) -> Result<DMatrix<f64>> {
    let n = res.x_star.len();
    let kkt = kkt_matrix(level, &res.x_star, &res.multipliers);
    let f = factor_checked(&kkt, cfg.cond_cap)?;
    let mut rhs = DMatrix::zeros(kkt.nrows(), n);
    rhs.view_mut((0, 0), (n, n)).fill_with_identity();
    f.solve_mut(&mut rhs);
    Ok(rhs.rows(0, n).into_owned())
}

/// Writes `label,iteration,method,feas_residual,stat_residual` for each traced projection.
pub fn write_trace_csv(traces: &[(String, &ProjectionResult)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["label", "iteration", "method", "feas_residual", "stat_residual"])?;
    for (label, res) in traces {
        for row in &res.trace {
            w.write_record([
                label.clone(),
                row.iteration.to_string(),
                row.method.to_string(),
                format!("{}", row.feas_residual),
                format!("{}", row.stat_residual),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AffineConstraint, SphereConstraint};

    fn plane() -> AffineConstraint {
        let a = DMatrix::from_row_slice(2, 5, &[1.0, 0.5, 0.0, -1.0, 2.0, 0.0, 1.0, 1.0, 1.0, -0.5]);
        AffineConstraint::new(a, DVector::from_vec(vec![0.3, -1.2])).unwrap()
    }

    #[test]
    fn feasible_start_needs_no_iterations() {
        let level = plane();
        let cfg = ProjectionConfig::default();
        let (x0, _) = level.affine_projection(&DVector::from_element(5, 0.4)).unwrap();
        for solver in [SolverChoice::Auto, SolverChoice::NewtonOnly, SolverChoice::AlmOnly] {
            let res = project(&level, &x0, &ProjectionConfig { solver, ..cfg });
            assert!(res.converged());
            assert_eq!(res.iterations, 0);
            assert_eq!(res.x_star, x0);
        }
    }

    #[test]
    fn solvers_agree_on_affine_sets() {
        let level = plane();
        let cfg = ProjectionConfig::default();
        let y0 = DVector::from_vec(vec![1.0, -2.0, 0.5, 0.0, 3.0]);
        let a = project_affine(&level, &y0, &cfg).unwrap();
        let n = project_newton(&level, &y0, &cfg);
        let l = project_alm(&level, &y0, &cfg);
        assert!(a.converged() && n.converged() && l.converged());
        assert_eq!(n.iterations, 1);
        assert!((&a.x_star - &n.x_star).amax() < 1e-12);
        assert!((&a.x_star - &l.x_star).amax() < 1e-8);
    }

    #[test]
    fn affine_projection_jacobian_is_the_tangent_projector() {
        let level = plane();
        let cfg = ProjectionConfig::default();
        let res = project(&level, &DVector::from_element(5, 1.0), &cfg);
        let d = projection_jacobian(&level, &res, &cfg).unwrap();
        assert!((d - level.tangent_projector()).amax() < 1e-12);
    }

    #[test]
    fn sphere_projection_is_radial_with_superlinear_decay() {
        let level = SphereConstraint::new(4, 1.5).unwrap();
        let cfg = ProjectionConfig { record_trace: true, ..Default::default() };
        let y0 = DVector::from_vec(vec![0.5, 2.0, -1.0, 0.3]);
        let res = project_newton(&level, &y0, &cfg);
        assert!(res.converged());
        let expected = &y0 * (1.5 / y0.norm());
        assert!((&res.x_star - expected).amax() < 1e-10);
        let feas: Vec<f64> = res.trace.iter().map(|t| t.feas_residual).filter(|f| *f > 1e-14).collect();
        let tail: Vec<f64> = feas.windows(2).map(|w| w[1] / w[0]).collect();
        assert!(tail.len() >= 2);
        assert!(tail.last().unwrap() < &0.1);
    }

    #[test]
    fn sphere_projection_jacobian_matches_radial_derivative() {
        let level = SphereConstraint::new(3, 1.0).unwrap();
        let cfg = ProjectionConfig::default();
        let y0 = DVector::from_vec(vec![0.3, 1.1, -0.4]);
        let res = project(&level, &y0, &cfg);
        let d = projection_jacobian(&level, &res, &cfg).unwrap();
        let r = y0.norm();
        let u = &y0 / r;
        let expected = (DMatrix::identity(3, 3) - &u * u.transpose()) / r;
        assert!((d - expected).amax() < 1e-9);
    }

    #[test]
    fn alm_tightening_never_loosens_feasibility() {
        let level = SphereConstraint::new(5, 1.0).unwrap();
        let y0 = DVector::from_vec(vec![0.9, 0.4, -0.2, 0.1, 0.3]);
        let mut last = f64::INFINITY;
        for eps in [1e-4, 1e-5, 1e-6, 1e-7, 1e-8] {
            let cfg = ProjectionConfig { eps_feas: eps, solver: SolverChoice::AlmOnly, ..Default::default() };
            let res = project(&level, &y0, &cfg);
            assert!(res.converged());
            assert!(res.feas_residual <= last);
            last = res.feas_residual;
        }
    }

    #[test]
    fn singular_kkt_is_reported_at_the_sphere_center() {
        let level = SphereConstraint::new(3, 1.0).unwrap();
        let res = project_newton(&level, &DVector::zeros(3), &ProjectionConfig::default());
        assert_eq!(res.status, ProjectionStatus::SingularKkt);
    }
}
