//! Sensitivity of a Jacobian-weighted Monte Carlo density estimate to the Jacobian selection
//! made at nondifferentiable points.

use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::density::gaussian_kernel;
use crate::error::{Error, Result};
use crate::model::{log_jacobian_factor, ChartEstimator, ConservativeJacobian, JacobianSource, LikelihoodSpec, PdlMap};
use crate::oracle::{sjo_gs, OracleConfig};

/// Chooses one Jacobian element at `x`; all randomness comes from `rng`.
pub trait JacobianPolicy: Sync {
    fn select(&self, x: &DVector<f64>, rng: &mut ChaCha8Rng) -> Result<ConservativeJacobian>;
}

impl<F> JacobianPolicy for F
where
    F: Fn(&DVector<f64>, &mut ChaCha8Rng) -> Result<ConservativeJacobian> + Sync,
{
    fn select(&self, x: &DVector<f64>, rng: &mut ChaCha8Rng) -> Result<ConservativeJacobian> {
        self(x, rng)
    }
}

/// The gradient-sampling oracle with a fixed configuration.
pub struct SjoPolicy<'a, M: PdlMap + ?Sized> {
    pub map: &'a M,
    pub cfg: OracleConfig,
}

impl<M: PdlMap + ?Sized> JacobianPolicy for SjoPolicy<'_, M> {
    fn select(&self, x: &DVector<f64>, rng: &mut ChaCha8Rng) -> Result<ConservativeJacobian> {
        Ok(sjo_gs(self.map, x, &self.cfg, rng)?.jacobian)
    }
}

#[derive(Debug, Clone)]
pub struct BiasEstimate {
    /// `estimate_a - estimate_b`.
    pub difference: f64,
    /// Standard error of the paired per-draw differences.
    pub paired_se: f64,
    /// `sqrt(se_a^2 + se_b^2)`, ignoring the pairing.
    pub combined_se: f64,
    pub estimate_a: f64,
    pub estimate_b: f64,
    pub se_a: f64,
    pub se_b: f64,
    pub n: usize,
    /// Draws where the policy failed or returned a rank-deficient element; they contribute zero.
    pub singular_a: usize,
    pub singular_b: usize,
}

fn factor(j: &ConservativeJacobian) -> Option<f64> {
    log_jacobian_factor(j).ok().map(f64::exp)
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (var / n).sqrt())
}

/// Compares `mean(p K_h(theta_hat - theta') J_piece / (q J_policy))` under two policies.
///
/// Draws come from the likelihood, and draw `i` gives both policies the same random stream,
/// so identical policies agree exactly. Where the classical piece Jacobian is singular the
/// integrand is zero.
pub fn bias_diagnostic<M, A, B>(
    map: &M,
    theta_prime: &DVector<f64>,
    spec: &LikelihoodSpec,
    policy_a: &A,
    policy_b: &B,
    bandwidth: f64,
    n: usize,
    seed: u64,
) -> Result<BiasEstimate>
where
    M: PdlMap + ChartEstimator + ?Sized,
    A: JacobianPolicy + ?Sized,
    B: JacobianPolicy + ?Sized,
{
    if n < 2 || !(bandwidth > 0.0) {
        return Err(Error::Input(format!("need n >= 2 and bandwidth > 0, got {n} and {bandwidth}")));
    }
    let dim = map.input_dim();
    let rows: Vec<(f64, f64, bool, bool)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(2 * i as u64);
            let x = spec.sample(dim, &mut rng)?;
            let Some(theta) = map.chart_estimate(&x) else {
                return Ok((0.0, 0.0, false, false));
            };
            let kern = gaussian_kernel(&(theta - theta_prime), bandwidth);
            let (g, _) = map.piece_jacobian(&x)?;
            let Some(j_piece) = factor(&ConservativeJacobian::new(g, JacobianSource::Frechet)) else {
                return Ok((0.0, 0.0, false, false));
            };
            let h = kern * j_piece;
            let eval = |policy: &dyn Fn(&mut ChaCha8Rng) -> Result<ConservativeJacobian>| -> Result<(f64, bool)> {
                let mut prng = ChaCha8Rng::seed_from_u64(seed);
                prng.set_stream(2 * i as u64 + 1);
                Ok(match policy(&mut prng).ok().as_ref().and_then(factor) {
                    Some(j) => (h / j, false),
                    None => (0.0, true),
                })
            };
            let (a, sa) = eval(&|r| policy_a.select(&x, r))?;
            let (b, sb) = eval(&|r| policy_b.select(&x, r))?;
            Ok((a, b, sa, sb))
        })
        .collect::<Result<_>>()?;
    let a: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let b: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let d: Vec<f64> = rows.iter().map(|r| r.0 - r.1).collect();
    let (ea, se_a) = mean_se(&a);
    let (eb, se_b) = mean_se(&b);
    let (diff, paired_se) = mean_se(&d);
    Ok(BiasEstimate {
        difference: diff,
        paired_se,
        combined_se: (se_a * se_a + se_b * se_b).sqrt(),
        estimate_a: ea,
        estimate_b: eb,
        se_a,
        se_b,
        n,
        singular_a: rows.iter().filter(|r| r.2).count(),
        singular_b: rows.iter().filter(|r| r.3).count(),
    })
}

/// Writes `case,difference,paired_se,combined_se,estimate_a,estimate_b,n,singular_a,singular_b`.
pub fn write_bias_csv(cases: &[(String, BiasEstimate)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["case", "difference", "paired_se", "combined_se", "estimate_a", "estimate_b", "n", "singular_a", "singular_b"])?;
    for (name, e) in cases {
        w.write_record([
            name.clone(),
            format!("{}", e.difference),
            format!("{}", e.paired_se),
            format!("{}", e.combined_se),
            format!("{}", e.estimate_a),
            format!("{}", e.estimate_b),
            e.n.to_string(),
            e.singular_a.to_string(),
            e.singular_b.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
