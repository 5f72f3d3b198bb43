//! Projection-based Metropolis-Hastings on estimator level sets.
//!
//! Each step draws a Gaussian tangent move in the current frame, projects it back onto the
//! level set, and corrects the acceptance ratio by the volume factors of the forward and
//! reverse projection maps restricted to the tangent frames.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{log_jacobian_factor, ConservativeJacobian, LevelSet, LikelihoodSpec};
use crate::oracle::{sjo_gs, tangent_basis, OracleConfig, TangentFrame};
use crate::projection::{project, projection_jacobian, ProjectionConfig, ProjectionStatus};

/// Unnormalized log-density `log A(x)` of the sampling target on the level set.
pub trait TargetDensity: Sync {
    fn log_density(&self, x: &DVector<f64>, jacobian: &ConservativeJacobian) -> Result<f64>;
}

#[derive(Debug, Clone)]
pub enum TargetKind {
    /// `A = 1`: uniform with respect to Hausdorff measure.
    HausdorffUniform,
    /// `A = p(x | theta0) / J(x)`: the integrand of the level-set density.
    LikelihoodOverJacobian(LikelihoodSpec),
}

impl TargetDensity for TargetKind {
    fn log_density(&self, x: &DVector<f64>, jacobian: &ConservativeJacobian) -> Result<f64> {
        match self {
            Self::HausdorffUniform => Ok(0.0),
            Self::LikelihoodOverJacobian(spec) => Ok(spec.log_density(x)? - log_jacobian_factor(jacobian)?),
        }
    }
}

impl<F> TargetDensity for F
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
{
    fn log_density(&self, x: &DVector<f64>, _jacobian: &ConservativeJacobian) -> Result<f64> {
        Ok(self(x))
    }
}

/// Construction of the reverse proposal used in the volume correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReverseMode {
    /// Reverse candidate `x' - h B_curr v`, with its volume factor taken in the frame at `x'`.
    Verbatim,
    /// Reverse tangent move at `x'` whose projection returns exactly to `x`, with the
    /// Gaussian proposal-density ratio included.
    Symmetric,
}

/// Dual-averaging step-size adaptation toward a target acceptance rate during burn-in.
#[derive(Debug, Clone, Copy)]
pub struct AdaptConfig {
    pub warmup_steps: usize,
    pub target_accept: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self { warmup_steps: 500, target_accept: 0.3 }
    }
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    /// Total number of steps including burn-in.
    pub n_samples: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Tangent step scale; `None` uses `0.5 / sqrt(N - k)`.
    pub step_scale: Option<f64>,
    pub oracle: OracleConfig,
    pub projection: ProjectionConfig,
    pub reverse: ReverseMode,
    /// Reject moves whose reverse projection misses the current point by more than `10 eps_feas`.
    pub reverse_check: bool,
    pub adapt: Option<AdaptConfig>,
    pub seed: u64,
    pub record_samples: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            burn_in: 100,
            thin: 1,
            step_scale: None,
            oracle: OracleConfig::default(),
            projection: ProjectionConfig::default(),
            reverse: ReverseMode::Verbatim,
            reverse_check: false,
            adapt: None,
            seed: 0,
            record_samples: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RejectReason {
    MhReject,
    ProjectionFail,
    SingularKkt,
    RegionExit,
}

impl RejectReason {
    pub const ALL: [RejectReason; 4] = [Self::MhReject, Self::ProjectionFail, Self::SingularKkt, Self::RegionExit];
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MhReject => "mh_reject",
            Self::ProjectionFail => "projection_fail",
            Self::SingularKkt => "singular_kkt",
            Self::RegionExit => "region_exit",
        })
    }
}

/// Point on the level set with its cached Jacobian element, tangent frame and target value.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub x: DVector<f64>,
    pub jacobian: ConservativeJacobian,
    pub frame: TangentFrame,
    pub log_target: f64,
}

#[derive(Debug, Clone)]
pub struct StepInfo {
    pub accepted: bool,
    pub reason: Option<RejectReason>,
    pub log_alpha: f64,
    pub log_j_fwd: f64,
    pub log_j_rev: f64,
    /// Tangent coordinates of the forward move.
    pub v: DVector<f64>,
    /// Tangent coordinates at the proposal that map back to the current point (symmetric mode).
    pub v_rev: Option<DVector<f64>>,
    /// The proposed state, present whenever the proposal was fully evaluated.
    pub proposal: Option<ChainState>,
}

/// Evaluates the oracle, frame and target at a point already on the level set.
pub fn init_state<L, T, R>(level: &L, x: DVector<f64>, target: &T, cfg: &SamplerConfig, rng: &mut R) -> Result<ChainState>
where
    L: LevelSet + ?Sized,
    T: TargetDensity + ?Sized,
    R: Rng + ?Sized,
{
    let out = sjo_gs(level, &x, &cfg.oracle, rng)?;
    let frame = tangent_basis(&out.jacobian)?;
    let log_target = target.log_density(&x, &out.jacobian)?;
    if !log_target.is_finite() {
        return Err(Error::Initialization(format!("target log-density is {log_target} at the initial point")));
    }
    Ok(ChainState { x, jacobian: out.jacobian, frame, log_target })
}

/// Default tangent step scale `0.5 / sqrt(d)` for a `d`-dimensional level set.
pub fn default_step_scale(tangent_dim: usize) -> f64 {
    0.5 / (tangent_dim.max(1) as f64).sqrt()
}

fn rejected(v: DVector<f64>, reason: RejectReason) -> StepInfo {
    StepInfo {
        accepted: false,
        reason: Some(reason),
        log_alpha: f64::NEG_INFINITY,
        log_j_fwd: f64::NAN,
        log_j_rev: f64::NAN,
        v,
        v_rev: None,
        proposal: None,
    }
}

fn status_reason(status: ProjectionStatus) -> RejectReason {
    match status {
        ProjectionStatus::InfeasibleRegion => RejectReason::RegionExit,
        ProjectionStatus::SingularKkt => RejectReason::SingularKkt,
        _ => RejectReason::ProjectionFail,
    }
}

/// Log volume factor `log sqrt(det((D B)^T (D B)))` of a projection derivative on a frame.
fn log_volume(d: &DMatrix<f64>, basis: &DMatrix<f64>) -> Option<f64> {
    linalg::log_volume_factor(&(d * basis))
}

/// One step with a caller-supplied tangent draw `v`; consumes randomness for the oracle and the
/// acceptance test only.
pub fn ppmh_step_with<L, T, R>(
    state: &ChainState,
    level: &L,
    target: &T,
    step_scale: f64,
    v: DVector<f64>,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> (ChainState, StepInfo)
where
    L: LevelSet + ?Sized,
    T: TargetDensity + ?Sized,
    R: Rng + ?Sized,
{
    let keep = |info: StepInfo| (state.clone(), info);
    let b_curr = &state.frame.basis;
    let y = &state.x + (b_curr * &v) * step_scale;

    let fwd = project(level, &y, &cfg.projection);
    if !fwd.converged() {
        return keep(rejected(v, status_reason(fwd.status)));
    }
    let Ok(d_fwd) = projection_jacobian(level, &fwd, &cfg.projection) else {
        return keep(rejected(v, RejectReason::SingularKkt));
    };
    let Some(log_j_fwd) = log_volume(&d_fwd, b_curr) else {
        return keep(rejected(v, RejectReason::SingularKkt));
    };

    let x_prop = fwd.x_star;
    let Ok(out) = sjo_gs(level, &x_prop, &cfg.oracle, rng) else {
        return keep(rejected(v, RejectReason::SingularKkt));
    };
    let Ok(frame_prop) = tangent_basis(&out.jacobian) else {
        return keep(rejected(v, RejectReason::SingularKkt));
    };
    let Ok(log_target_prop) = target.log_density(&x_prop, &out.jacobian) else {
        return keep(rejected(v, RejectReason::SingularKkt));
    };

    let (y_rev, v_rev) = match cfg.reverse {
        ReverseMode::Verbatim => (&x_prop - (b_curr * &v) * step_scale, None),
        ReverseMode::Symmetric => {
            // Tangent move t at x' with x' + t - x normal at x: G_prop t = 0, t = (x - x') + G_curr^T c.
            let gc = &state.jacobian.matrix;
            let gp = &out.jacobian.matrix;
            let dx = &state.x - &x_prop;
            let Some(c) = (gp * gc.transpose()).lu().solve(&(-(gp * &dx))) else {
                return keep(rejected(v, RejectReason::SingularKkt));
            };
            let t = dx + gc.tr_mul(&c);
            let vr = frame_prop.basis.tr_mul(&t) / step_scale;
            (&x_prop + (&frame_prop.basis * &vr) * step_scale, Some(vr))
        }
    };
    let rev = project(level, &y_rev, &cfg.projection);
    if !rev.converged() {
        return keep(rejected(v, status_reason(rev.status)));
    }
    if cfg.reverse_check {
        let tol = 10.0 * cfg.projection.eps_feas * state.x.norm().max(1.0);
        if (&rev.x_star - &state.x).norm() > tol {
            return keep(rejected(v, RejectReason::ProjectionFail));
        }
    }
    let Ok(d_rev) = projection_jacobian(level, &rev, &cfg.projection) else {
        return keep(rejected(v, RejectReason::SingularKkt));
    };
    let Some(log_j_rev) = log_volume(&d_rev, &frame_prop.basis) else {
        return keep(rejected(v, RejectReason::SingularKkt));
    };

    let mut log_alpha = log_target_prop - state.log_target + log_j_fwd - log_j_rev;
    if let Some(vr) = &v_rev {
        log_alpha += 0.5 * (v.norm_squared() - vr.norm_squared());
    }
    if log_alpha.is_nan() {
        log_alpha = f64::NEG_INFINITY;
    }
    let u: f64 = rng.gen();
    let accepted = u.ln() < log_alpha.min(0.0);
    let proposal = ChainState { x: x_prop, jacobian: out.jacobian, frame: frame_prop, log_target: log_target_prop };
    let info = StepInfo {
        accepted,
        reason: (!accepted).then_some(RejectReason::MhReject),
        log_alpha,
        log_j_fwd,
        log_j_rev,
        v,
        v_rev,
        proposal: Some(proposal.clone()),
    };
    if accepted {
        (proposal, info)
    } else {
        keep(info)
    }
}

/// One step with a fresh standard Gaussian tangent draw.
pub fn ppmh_step<L, T, R>(state: &ChainState, level: &L, target: &T, step_scale: f64, cfg: &SamplerConfig, rng: &mut R) -> (ChainState, StepInfo)
where
    L: LevelSet + ?Sized,
    T: TargetDensity + ?Sized,
    R: Rng + ?Sized,
{
    let d = state.frame.dim();
    let v = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
    ppmh_step_with(state, level, target, step_scale, v, cfg, rng)
}

/// Recorded output of a chain after burn-in and thinning.
#[derive(Debug, Clone)]
pub struct Chain {
    /// Chain states (empty when `record_samples` is off).
    pub samples: Vec<DVector<f64>>,
    pub step_index: Vec<usize>,
    pub accepted: Vec<bool>,
    pub k_trace: Vec<usize>,
    pub log_target: Vec<f64>,
    pub log_j_fwd: Vec<f64>,
    pub log_j_rev: Vec<f64>,
    pub reasons: Vec<Option<RejectReason>>,
    pub step_seconds: Vec<f64>,
    /// Step scale in force after burn-in.
    pub step_scale: f64,
    pub config: SamplerConfig,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.accepted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accepted.is_empty()
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.accepted.iter().filter(|a| **a).count() as f64 / self.len() as f64
    }

    /// Values of `f` along the recorded states.
    pub fn functional<F: Fn(&DVector<f64>) -> f64>(&self, f: F) -> Vec<f64> {
        self.samples.iter().map(f).collect()
    }

    /// Writes `step,accepted,k,log_target,j_fwd,j_rev,reason`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "accepted", "k", "log_target", "j_fwd", "j_rev", "reason"])?;
        for i in 0..self.len() {
            w.write_record([
                self.step_index[i].to_string(),
                (self.accepted[i] as u8).to_string(),
                self.k_trace[i].to_string(),
                format!("{}", self.log_target[i]),
                format!("{}", self.log_j_fwd[i].exp()),
                format!("{}", self.log_j_rev[i].exp()),
                self.reasons[i].map(|r| r.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `step,x_0..x_{N-1}`, refusing outputs with more than `max_entries` numbers.
    pub fn write_samples_csv(&self, path: &Path, max_entries: usize) -> Result<()> {
        let n = self.samples.first().map_or(0, |s| s.len());
        if self.samples.len() * n > max_entries {
            return Err(Error::Input(format!(
                "{} samples of dimension {n} exceed the {max_entries}-entry output limit",
                self.samples.len()
            )));
        }
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["step".to_string()];
        header.extend((0..n).map(|j| format!("x_{j}")));
        w.write_record(&header)?;
        for (i, s) in self.samples.iter().enumerate() {
            let mut row = vec![self.step_index[i].to_string()];
            row.extend(s.iter().map(|v| format!("{v}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

struct DualAveraging {
    mu: f64,
    h_bar: f64,
    log_h: f64,
    log_h_bar: f64,
    target: f64,
    t: f64,
}

impl DualAveraging {
    fn new(h0: f64, target: f64) -> Self {
        Self { mu: (10.0 * h0).ln(), h_bar: 0.0, log_h: h0.ln(), log_h_bar: h0.ln(), target, t: 0.0 }
    }

    fn update(&mut self, accept_prob: f64) {
        const GAMMA: f64 = 0.05;
        const T0: f64 = 10.0;
        const KAPPA: f64 = 0.75;
        self.t += 1.0;
        let w = 1.0 / (self.t + T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_prob);
        self.log_h = self.mu - self.t.sqrt() / GAMMA * self.h_bar;
        let eta = self.t.powf(-KAPPA);
        self.log_h_bar = eta * self.log_h + (1.0 - eta) * self.log_h_bar;
    }
}

/// Runs `cfg.n_samples` steps from `x_init` (projected first when off the level set) and records
/// every `thin`-th step after `burn_in`.
pub fn run_chain<L, T>(level: &L, x_init: &DVector<f64>, target: &T, cfg: &SamplerConfig) -> Result<Chain>
where
    L: LevelSet + ?Sized,
    T: TargetDensity + ?Sized,
{
    if cfg.thin == 0 || cfg.n_samples == 0 || cfg.burn_in >= cfg.n_samples {
        return Err(Error::Input(format!(
            "need thin >= 1 and burn_in < n_samples, got thin = {}, burn_in = {}, n_samples = {}",
            cfg.thin, cfg.burn_in, cfg.n_samples
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = if level.residual(x_init).norm() <= cfg.projection.eps_feas && level.in_region(x_init) {
        x_init.clone()
    } else {
        let res = project(level, x_init, &cfg.projection);
        if !res.converged() {
            return Err(Error::Initialization(format!("initial projection ended with status {}", res.status)));
        }
        res.x_star
    };
    let mut state = init_state(level, start, target, cfg, &mut rng).map_err(|e| match e {
        Error::Initialization(m) => Error::Initialization(m),
        other => Error::Initialization(other.to_string()),
    })?;
    let dim = state.frame.dim();
    let mut h = cfg.step_scale.unwrap_or_else(|| default_step_scale(dim));
    let mut adapt = cfg.adapt.map(|a| (DualAveraging::new(h, a.target_accept), a.warmup_steps.min(cfg.burn_in)));

    let n_rec = (cfg.n_samples - cfg.burn_in).div_ceil(cfg.thin);
    let mut chain = Chain {
        samples: Vec::with_capacity(if cfg.record_samples { n_rec } else { 0 }),
        step_index: Vec::with_capacity(n_rec),
        accepted: Vec::with_capacity(n_rec),
        k_trace: Vec::with_capacity(n_rec),
        log_target: Vec::with_capacity(n_rec),
        log_j_fwd: Vec::with_capacity(n_rec),
        log_j_rev: Vec::with_capacity(n_rec),
        reasons: Vec::with_capacity(n_rec),
        step_seconds: Vec::with_capacity(n_rec),
        step_scale: h,
        config: cfg.clone(),
    };
    let k = level.output_dim();
    for t in 0..cfg.n_samples {
        let clock = Instant::now();
        let (next, info) = ppmh_step(&state, level, target, h, cfg, &mut rng);
        let elapsed = clock.elapsed().as_secs_f64();
        state = next;
        if let Some((da, warmup)) = adapt.as_mut() {
            if t < *warmup {
                da.update(info.log_alpha.min(0.0).exp());
                h = da.log_h.exp();
                if t + 1 == *warmup {
                    h = da.log_h_bar.exp();
                }
            }
        }
        if t >= cfg.burn_in && (t - cfg.burn_in) % cfg.thin == 0 {
            if cfg.record_samples {
                chain.samples.push(state.x.clone());
            }
            chain.step_index.push(t);
            chain.accepted.push(info.accepted);
            chain.k_trace.push(k);
            chain.log_target.push(state.log_target);
            chain.log_j_fwd.push(info.log_j_fwd);
            chain.log_j_rev.push(info.log_j_rev);
            chain.reasons.push(info.reason);
            chain.step_seconds.push(elapsed);
        }
    }
    chain.step_scale = h;
    Ok(chain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AffineConstraint, SphereConstraint};

    fn plane() -> AffineConstraint {
        let a = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        AffineConstraint::new(a, DVector::from_element(1, 0.0)).unwrap()
    }

    #[test]
    fn zero_step_scale_accepts_and_stays_put() {
        let level = plane();
        let cfg = SamplerConfig { n_samples: 20, burn_in: 0, step_scale: Some(0.0), ..Default::default() };
        let x0 = DVector::from_vec(vec![1.0, -1.0, 0.0]);
        let chain = run_chain(&level, &x0, &TargetKind::HausdorffUniform, &cfg).unwrap();
        assert_eq!(chain.acceptance_rate(), 1.0);
        assert!(chain.samples.iter().all(|s| (s - &x0).amax() < 1e-15));
    }

    #[test]
    fn affine_moves_have_unit_volume_factors() {
        let level = plane();
        let cfg = SamplerConfig { n_samples: 50, burn_in: 0, ..Default::default() };
        let chain = run_chain(&level, &DVector::zeros(3), &TargetKind::HausdorffUniform, &cfg).unwrap();
        for (f, r) in chain.log_j_fwd.iter().zip(&chain.log_j_rev) {
            assert!(f.abs() < 1e-12 && r.abs() < 1e-12);
        }
        assert_eq!(chain.acceptance_rate(), 1.0);
    }

    #[test]
    fn chain_length_follows_burn_in_and_thinning() {
        let level = plane();
        let cfg = SamplerConfig { n_samples: 101, burn_in: 100, ..Default::default() };
        let chain = run_chain(&level, &DVector::zeros(3), &TargetKind::HausdorffUniform, &cfg).unwrap();
        assert_eq!(chain.len(), 1);
        let cfg = SamplerConfig { n_samples: 110, burn_in: 10, thin: 7, ..Default::default() };
        let chain = run_chain(&level, &DVector::zeros(3), &TargetKind::HausdorffUniform, &cfg).unwrap();
        assert_eq!(chain.len(), 15);
    }

    #[test]
    fn states_stay_on_the_sphere() {
        let level = SphereConstraint::new(4, 1.0).unwrap();
        let cfg = SamplerConfig { n_samples: 300, burn_in: 0, ..Default::default() };
        let x0 = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        let chain = run_chain(&level, &x0, &TargetKind::HausdorffUniform, &cfg).unwrap();
        assert!(chain.samples.iter().all(|s| (s.norm_squared() - 1.0).abs() <= 1e-9));
        assert!(chain.acceptance_rate() > 0.2);
    }

    #[test]
    fn same_seed_reproduces_the_chain() {
        let level = SphereConstraint::new(3, 1.0).unwrap();
        let cfg = SamplerConfig { n_samples: 50, burn_in: 5, seed: 17, ..Default::default() };
        let x0 = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        let a = run_chain(&level, &x0, &TargetKind::HausdorffUniform, &cfg).unwrap();
        let b = run_chain(&level, &x0, &TargetKind::HausdorffUniform, &cfg).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.accepted, b.accepted);
    }

    #[test]
    fn adaptation_is_frozen_after_burn_in() {
        let level = SphereConstraint::new(6, 1.0).unwrap();
        let cfg = SamplerConfig {
            n_samples: 400,
            burn_in: 300,
            step_scale: Some(3.0),
            adapt: Some(AdaptConfig { warmup_steps: 1000, target_accept: 0.3 }),
            ..Default::default()
        };
        let x0 = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let chain = run_chain(&level, &x0, &TargetKind::HausdorffUniform, &cfg).unwrap();
        assert!(chain.step_scale < 3.0);
        assert!(chain.acceptance_rate() > 0.05);
    }

    #[test]
    fn invalid_lengths_are_rejected() {
        let level = plane();
        let cfg = SamplerConfig { n_samples: 10, burn_in: 10, ..Default::default() };
        assert!(run_chain(&level, &DVector::zeros(3), &TargetKind::HausdorffUniform, &cfg).is_err());
    }
}
