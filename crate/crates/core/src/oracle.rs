//! Jacobian oracles: gradient-sampling selection of a conservative Jacobian element and the
//! tangent frames derived from it.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{ConservativeJacobian, JacobianSource, LevelSet, PdlMap, PieceLabel};
use crate::projection::{project, ProjectionConfig};

/// How one element is chosen from the sampled Jacobians.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionPolicy {
    /// A uniformly random sample.
    RandomElement,
    /// The entrywise average of all samples.
    MeanElement,
}

/// Radius of the sampling ball around the query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleRadius {
    /// `c * (1 + |x0|)`.
    Relative(f64),
    Absolute(f64),
}

impl OracleRadius {
    pub fn resolve(&self, x0: &DVector<f64>) -> f64 {
        match *self {
            Self::Relative(c) => c * (1.0 + x0.norm()),
            Self::Absolute(r) => r,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OracleConfig {
    pub radius: OracleRadius,
    pub num_samples: usize,
    pub policy: SelectionPolicy,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { radius: OracleRadius::Relative(1e-6), num_samples: 5, policy: SelectionPolicy::RandomElement }
    }
}

#[derive(Debug, Clone)]
pub struct OracleSample {
    pub point: DVector<f64>,
    pub piece: PieceLabel,
    pub full_rank: bool,
}

#[derive(Debug, Clone)]
pub struct OracleOutput {
    pub jacobian: ConservativeJacobian,
    pub samples: Vec<OracleSample>,
    /// Index of the chosen sample under `RandomElement`.
    pub selected: Option<usize>,
    pub radius: f64,
}

impl OracleOutput {
    /// Piece label of the returned element when it is a single sample.
    pub fn selected_piece(&self) -> Option<PieceLabel> {
        self.selected.map(|i| self.samples[i].piece)
    }
}

/// Uniform draw from the Euclidean ball of `radius` around `center`.
pub fn sample_ball<R: Rng + ?Sized>(center: &DVector<f64>, radius: f64, rng: &mut R) -> DVector<f64> {
    let n = center.len();
    let mut dir = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
    let norm = dir.norm();
    if norm > 0.0 {
        dir /= norm;
    }
    let u: f64 = rng.gen();
    center + dir * (radius * u.powf(1.0 / n as f64))
}

fn full_rank(g: &DMatrix<f64>) -> bool {
    let k = g.nrows();
    k == 0 || linalg::numerical_rank(g, linalg::RANK_TOL) == k
}

/// Samples `num_samples` points in a small ball around `x0`, evaluates the classical derivative
/// at each, and returns one conservative Jacobian element chosen by `cfg.policy`.
pub fn sjo_gs<M: PdlMap + ?Sized, R: Rng + ?Sized>(map: &M, x0: &DVector<f64>, cfg: &OracleConfig, rng: &mut R) -> Result<OracleOutput> {
    if cfg.num_samples == 0 {
        return Err(Error::Input("the oracle needs at least one sample".into()));
    }
    let radius = cfg.radius.resolve(x0);
    if !(radius > 0.0) {
        return Err(Error::Input(format!("oracle radius must be positive, got {radius}")));
    }
    let points: Vec<DVector<f64>> = (0..cfg.num_samples).map(|_| sample_ball(x0, radius, rng)).collect();
    let jacs = map.piece_jacobians_near(x0, radius, &points)?;
    let samples: Vec<OracleSample> = points
        .into_iter()
        .zip(jacs.iter())
        .map(|(point, (g, piece))| OracleSample { point, piece: *piece, full_rank: full_rank(g) })
        .collect();
    if samples.iter().all(|s| !s.full_rank) {
        return Err(Error::OracleFailure(format!("all {} sampled Jacobians are singular", samples.len())));
    }
    let (matrix, selected) = match cfg.policy {
        SelectionPolicy::RandomElement => {
            let i = rng.gen_range(0..jacs.len());
            (jacs[i].0.clone(), Some(i))
        }
        SelectionPolicy::MeanElement => {
            let mut acc = DMatrix::zeros(jacs[0].0.nrows(), jacs[0].0.ncols());
            for (g, _) in &jacs {
                acc += g;
            }
            (acc / jacs.len() as f64, None)
        }
    };
    Ok(OracleOutput { jacobian: ConservativeJacobian::new(matrix, JacobianSource::SjoSelection), samples, selected, radius })
}

/// Orthonormal tangent frame (N x (N - k)) of a level set.
#[derive(Debug, Clone)]
pub struct TangentFrame {
    pub basis: DMatrix<f64>,
    pub source: JacobianSource,
}

impl TangentFrame {
    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }
}

/// Kernel of a full-row-rank Jacobian element with columns signed so their first nonzero entry is positive.
pub fn tangent_basis(j: &ConservativeJacobian) -> Result<TangentFrame> {
    Ok(TangentFrame { basis: linalg::null_space(&j.matrix)?, source: j.source })
}

/// Intersection of the kernels of all sampled limiting Jacobians.
pub fn stca_frame<M: PdlMap + ?Sized, R: Rng + ?Sized>(map: &M, x0: &DVector<f64>, cfg: &OracleConfig, rng: &mut R) -> Result<TangentFrame> {
    let radius = cfg.radius.resolve(x0);
    let points: Vec<DVector<f64>> = (0..cfg.num_samples.max(1)).map(|_| sample_ball(x0, radius, rng)).collect();
    let jacs = map.piece_jacobians_near(x0, radius, &points)?;
    let n = map.input_dim();
    let k = map.output_dim();
    let mut stack = DMatrix::zeros(n, k * jacs.len());
    for (i, (g, _)) in jacs.iter().enumerate() {
        stack.view_mut((0, i * k), (n, k)).copy_from(&g.transpose());
    }
    let normal = linalg::range_basis(&stack, 1e-10);
    if normal.ncols() >= n {
        return Err(Error::DegenerateCone);
    }
    let mut basis = linalg::orthogonal_complement(&normal);
    linalg::canonicalize_signs(&mut basis);
    Ok(TangentFrame { basis, source: JacobianSource::Stca })
}

/// Probes the level set by projecting `n_probe` random points from a ball of radius `eps`
/// and keeps the leading `N - k` principal directions of the displacements.
///
/// `n_probe = None` uses `10 (N - k)` probes.
pub fn gtp_frame<L: LevelSet + ?Sized, R: Rng + ?Sized>(
    level: &L,
    x0: &DVector<f64>,
    eps: f64,
    n_probe: Option<usize>,
    proj: &ProjectionConfig,
    rng: &mut R,
) -> Result<TangentFrame> {
    let n = level.input_dim();
    let dim = n - level.output_dim();
    let n_probe = n_probe.unwrap_or(10 * dim);
    if n_probe < dim {
        return Err(Error::Probing(format!("{n_probe} probes cannot span a {dim}-dimensional tangent space")));
    }
    let mut devs: Vec<DVector<f64>> = Vec::with_capacity(n_probe);
    for _ in 0..n_probe {
        let y = sample_ball(x0, eps, rng);
        let res = project(level, &y, proj);
        if res.converged() {
            devs.push(res.x_star - x0);
        }
    }
    if 2 * devs.len() < n_probe {
        return Err(Error::Probing(format!("{} of {n_probe} probe projections failed", n_probe - devs.len())));
    }
    let d = DMatrix::from_columns(&devs);
    let svd = d.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].partial_cmp(&svd.singular_values[a]).unwrap_or(std::cmp::Ordering::Equal));
    if order.len() < dim {
        return Err(Error::Probing("too few successful probes to span the tangent space".into()));
    }
    let mut basis = DMatrix::zeros(n, dim);
    for (c, &i) in order.iter().take(dim).enumerate() {
        basis.set_column(c, &u.column(i));
    }
    linalg::canonicalize_signs(&mut basis);
    Ok(TangentFrame { basis, source: JacobianSource::Gtp })
}

/// Writes `call,sample,piece,full_rank,selected` rows for a batch of oracle calls.
pub fn write_piece_labels_csv(outputs: &[OracleOutput], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["call", "sample", "piece", "full_rank", "selected"])?;
    for (c, out) in outputs.iter().enumerate() {
        for (i, s) in out.samples.iter().enumerate() {
            w.write_record([
                c.to_string(),
                i.to_string(),
                s.piece.to_string(),
                s.full_rank.to_string(),
                (out.selected == Some(i)).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AffineConstraint, SoftThresholdMean, SphereConstraint};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ball_samples_stay_inside_the_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        for _ in 0..1000 {
            assert!((sample_ball(&c, 0.1, &mut rng) - &c).norm() <= 0.1);
        }
    }

    #[test]
    fn smooth_points_return_the_classical_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let toy = SoftThresholdMean::new(6, 0.5).unwrap();
        let x = DVector::from_element(6, 2.0);
        for policy in [SelectionPolicy::RandomElement, SelectionPolicy::MeanElement] {
            let out = sjo_gs(&toy, &x, &OracleConfig { policy, ..Default::default() }, &mut rng).unwrap();
            assert!((out.jacobian.matrix - toy.active_jacobian()).amax() < 1e-15);
            assert!(out.samples.iter().all(|s| s.piece == 1));
        }
    }

    #[test]
    fn dead_band_is_an_oracle_failure() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let toy = SoftThresholdMean::new(4, 1.0).unwrap();
        let err = sjo_gs(&toy, &DVector::zeros(4), &OracleConfig::default(), &mut rng).unwrap_err();
        assert!(matches!(err, Error::OracleFailure(_)));
    }

    #[test]
    fn same_seed_gives_identical_selection() {
        let toy = SoftThresholdMean::new(4, 1.0).unwrap();
        let x = DVector::from_element(4, 1.0);
        let a = sjo_gs(&toy, &x, &OracleConfig::default(), &mut ChaCha8Rng::seed_from_u64(9));
        let b = sjo_gs(&toy, &x, &OracleConfig::default(), &mut ChaCha8Rng::seed_from_u64(9));
        match (a, b) {
            (Ok(a), Ok(b)) => assert_eq!(a.jacobian.matrix, b.jacobian.matrix),
            (Err(_), Err(_)) => {}
            _ => panic!("same seed produced different outcomes"),
        }
    }

    #[test]
    fn stca_matches_kernel_at_smooth_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = DMatrix::from_row_slice(1, 4, &[1.0, -1.0, 0.5, 2.0]);
        let level = AffineConstraint::new(a.clone(), DVector::from_element(1, 0.0)).unwrap();
        let stca = stca_frame(&level, &DVector::zeros(4), &OracleConfig::default(), &mut rng).unwrap();
        let kern = linalg::null_space(&a).unwrap();
        assert!(linalg::principal_angles(&stca.basis, &kern).iter().all(|t| *t < 1e-8));
    }

    #[test]
    fn gtp_recovers_affine_tangent_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = DMatrix::from_row_slice(2, 5, &[1.0, 0.0, 2.0, -1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 3.0]);
        let level = AffineConstraint::new(a.clone(), DVector::from_vec(vec![1.0, 2.0])).unwrap();
        let (x0, _) = level.affine_projection(&DVector::zeros(5)).unwrap();
        let frame = gtp_frame(&level, &x0, 1e-4, None, &ProjectionConfig::default(), &mut rng).unwrap();
        let kern = linalg::null_space(&a).unwrap();
        assert!(linalg::principal_angles(&frame.basis, &kern).iter().all(|t| *t < 1e-3));
    }

    #[test]
    fn gtp_rejects_too_few_probes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let level = SphereConstraint::new(5, 1.0).unwrap();
        let x0 = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        let err = gtp_frame(&level, &x0, 1e-4, Some(3), &ProjectionConfig::default(), &mut rng).unwrap_err();
        assert!(matches!(err, Error::Probing(_)));
    }
}
