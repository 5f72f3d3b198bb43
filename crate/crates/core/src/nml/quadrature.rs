//! Integration of log-scale integrands over axis-aligned boxes.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::Result;

/// Gauss-Legendre nodes and weights on `[-1, 1]` from the Golub-Welsch eigenproblem.
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jacobi = DMatrix::<f64>::zeros(order, order);
    for i in 1..order {
        let b = i as f64 / ((4 * i * i - 1) as f64).sqrt();
        jacobi[(i, i - 1)] = b;
        jacobi[(i - 1, i)] = b;
    }
    let eig = jacobi.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..order)
        .map(|i| (eig.eigenvalues[i], 2.0 * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Integral `I` over a box as `ln I` and the standard error of `I` relative to `I`.
#[derive(Debug, Clone, Copy)]
pub struct BoxIntegral {
    pub log_value: f64,
    pub rel_se: f64,
    pub log_volume: f64,
    pub evaluations: usize,
}

/// Integrates `exp(f)` over `[lo, hi]`, where `f` returns the log integrand and the log of its
/// standard error (`-inf` when exact).
///
/// Uses a tensor Gauss-Legendre rule of `order` nodes per axis when `dim <= max_tensor_dim`,
/// and `mc_points` uniform draws otherwise.
pub fn integrate_box<F, R>(
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    order: usize,
    max_tensor_dim: usize,
    mc_points: usize,
    rng: &mut R,
    mut f: F,
) -> Result<BoxIntegral>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, f64)>,
    R: Rng + ?Sized,
{
    let k = lo.len();
    let half: Vec<f64> = (0..k).map(|j| 0.5 * (hi[j] - lo[j])).collect();
    let mid: Vec<f64> = (0..k).map(|j| 0.5 * (hi[j] + lo[j])).collect();
    let log_volume: f64 = half.iter().map(|h| (2.0 * h).ln()).sum();

    if k <= max_tensor_dim {
        let (nodes, weights) = gauss_legendre(order);
        let total = order.pow(k as u32);
        let mut terms = Vec::with_capacity(total);
        let mut se_terms = Vec::with_capacity(total);
        let mut idx = vec![0usize; k];
        for _ in 0..total {
            let point = DVector::from_fn(k, |j, _| mid[j] + half[j] * nodes[idx[j]]);
            let log_w: f64 = (0..k).map(|j| (weights[idx[j]] * half[j]).ln()).sum();
            let (lv, ls) = f(&point)?;
            terms.push(log_w + lv);
            se_terms.push(2.0 * (log_w + ls));
            for j in 0..k {
                idx[j] += 1;
                if idx[j] < order {
                    break;
                }
                idx[j] = 0;
            }
        }
        let log_value = log_sum_exp(terms.into_iter());
        let log_se = 0.5 * log_sum_exp(se_terms.into_iter());
        return Ok(BoxIntegral { log_value, rel_se: (log_se - log_value).exp(), log_volume, evaluations: total });
    }

    let mut lv = Vec::with_capacity(mc_points);
    let mut ls = Vec::with_capacity(mc_points);
    for _ in 0..mc_points {
        let point = DVector::from_fn(k, |j, _| lo[j] + (hi[j] - lo[j]) * rng.gen::<f64>());
        let (a, b) = f(&point)?;
        lv.push(a);
        ls.push(b);
    }
    let m = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Ok(BoxIntegral { log_value: m, rel_se: f64::NAN, log_volume, evaluations: mc_points });
    }
    let n = mc_points as f64;
    let scaled: Vec<f64> = lv.iter().map(|v| (v - m).exp()).collect();
    let mean = scaled.iter().sum::<f64>() / n;
    let var = scaled.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    let inner: f64 = ls.iter().map(|s| (2.0 * (s - m)).exp()).sum::<f64>() / (n * n);
    let se = (var / n + inner).sqrt();
    Ok(BoxIntegral { log_value: log_volume + m + mean.ln(), rel_se: se / mean, log_volume, evaluations: mc_points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn legendre_rule_integrates_polynomials_exactly() {
        let (x, w) = gauss_legendre(6);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-13);
        let moment = |p: i32| x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(p)).sum::<f64>();
        assert!((moment(10) - 2.0 / 11.0).abs() < 1e-13);
        assert!(moment(9).abs() < 1e-13);
    }

    #[test]
    fn tensor_rule_integrates_a_separable_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lo = DVector::from_vec(vec![-1.0, 0.0]);
        let hi = DVector::from_vec(vec![2.0, 1.5]);
        let res = integrate_box(&lo, &hi, 24, 3, 0, &mut rng, |t| Ok((-0.5 * t.norm_squared(), f64::NEG_INFINITY))).unwrap();
        use statrs::distribution::{ContinuousCDF, Normal};
        let n = Normal::new(0.0, 1.0).unwrap();
        let c = (2.0 * std::f64::consts::PI).sqrt();
        let want = c * (n.cdf(2.0) - n.cdf(-1.0)) * c * (n.cdf(1.5) - n.cdf(0.0));
        assert!((res.log_value - want.ln()).abs() < 1e-10);
        assert_eq!(res.rel_se, 0.0);
    }

    #[test]
    fn monte_carlo_rule_is_exact_for_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lo = DVector::from_element(5, -1.0);
        let hi = DVector::from_element(5, 1.0);
        let res = integrate_box(&lo, &hi, 4, 3, 100, &mut rng, |_| Ok((0.7, f64::NEG_INFINITY))).unwrap();
        assert!((res.log_value - (0.7 + 5.0 * 2f64.ln())).abs() < 1e-12);
        assert_eq!(res.rel_se, 0.0);
    }
}
