//! Dense linear-algebra kernels shared by the oracle, projection and sampler.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative threshold below which a singular value counts as zero.
pub const RANK_TOL: f64 = 1e-12;

/// Singular values of `m`, in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    s
}

/// Numerical rank with singular values compared against `tol * s_max`.
pub fn numerical_rank(m: &DMatrix<f64>, tol: f64) -> usize {
    let s = singular_values(m);
    match s.first() {
        Some(&smax) if smax > 0.0 => s.iter().filter(|&&v| v > tol * smax).count(),
        _ => 0,
    }
}

/// Spectral condition number `s_max / s_min` over the smaller dimension.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let s = singular_values(m);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

/// Log-determinant of a symmetric positive-definite matrix, `None` if Cholesky fails.
pub fn log_det_spd(m: &DMatrix<f64>) -> Option<f64> {
    let chol = m.clone().cholesky()?;
    let l = chol.l_dirty();
    let mut acc = 0.0;
    for i in 0..m.nrows() {
        let d = l[(i, i)];
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        acc += d.ln();
    }
    Some(2.0 * acc)
}

/// Flips column signs so the first entry of each column above `1e-10` in magnitude is positive.
pub fn canonicalize_signs(b: &mut DMatrix<f64>) {
    for j in 0..b.ncols() {
        let lead = b.column(j).iter().copied().find(|v| v.abs() > 1e-10);
        if let Some(v) = lead {
            if v < 0.0 {
                b.column_mut(j).neg_mut();
            }
        }
    }
}

/// Orthonormal basis (N x (N - r)) of the orthogonal complement of the column span of `g_t`.
///
/// `g_t` is N x r and must have full column rank.
pub fn orthogonal_complement(g_t: &DMatrix<f64>) -> DMatrix<f64> {
    let n = g_t.nrows();
    let r = g_t.ncols();
    if r == 0 {
        return DMatrix::identity(n, n);
    }
    let qr = g_t.clone().qr();
    let mut qt = DMatrix::<f64>::identity(n, n);
    qr.q_tr_mul(&mut qt);
    qt.transpose().columns(r, n - r).into_owned()
}

/// Orthonormal basis of `ker(g)` for a full-row-rank `g` (k x N), with canonical column signs.
pub fn null_space(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = g.nrows();
    let n = g.ncols();
    if k > n {
        return Err(Error::Singular(format!("{k} x {n} Jacobian has more rows than columns")));
    }
    if k > 0 {
        let s = singular_values(g);
        let smax = s[0];
        let smin = s[k - 1];
        if !(smax > 0.0) || smin <= RANK_TOL * smax {
            return Err(Error::Singular(format!(
                "rank-deficient Jacobian (s_min = {smin:.3e}, s_max = {smax:.3e})"
            )));
        }
    }
    let mut b = orthogonal_complement(&g.transpose());
    canonicalize_signs(&mut b);
    Ok(b)
}

/// Orthonormal basis for the column span of `m`, dropping directions below `tol * s_max`.
pub fn range_basis(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let n = m.nrows();
    if m.ncols() == 0 || n == 0 {
        return DMatrix::zeros(n, 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let s = &svd.singular_values;
    let smax = s.iter().copied().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..s.len()).filter(|&i| smax > 0.0 && s[i] > tol * smax).collect();
    let mut out = DMatrix::zeros(n, keep.len());
    for (c, &i) in keep.iter().enumerate() {
        out.set_column(c, &u.column(i));
    }
    out
}

/// Principal angles (radians, ascending) between the spans of two orthonormal bases.
pub fn principal_angles(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Vec<f64> {
    let c = u.transpose() * v;
    let mut cos = singular_values(&c);
    cos.reverse();
    let mut ang: Vec<f64> = cos.iter().map(|&s| s.clamp(-1.0, 1.0).acos()).collect();
    ang.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    ang
}

/// `sqrt(det(M^T M))` for a tall matrix `M` with full column rank, via Cholesky of the Gram matrix.
pub fn log_volume_factor(m: &DMatrix<f64>) -> Option<f64> {
    if m.ncols() == 0 {
        return Some(0.0);
    }
    let gram = m.tr_mul(m);
    log_det_spd(&gram).map(|ld| 0.5 * ld)
}

/// Symmetric indefinite factorization `P A P^T = L D L^T` with Bunch-Kaufman pivoting.
///
/// `D` is block diagonal with 1x1 and 2x2 blocks; `L` is unit lower triangular.
#[derive(Debug, Clone)]
pub struct SymmetricIndefinite {
    l: DMatrix<f64>,
    d_diag: Vec<f64>,
    d_off: Vec<f64>,
    block: Vec<u8>,
    perm: Vec<usize>,
    norm1: f64,
}

impl SymmetricIndefinite {
    pub fn factor(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Input("symmetric factorization needs a square matrix".into()));
        }
        let norm1 = (0..n).map(|j| a.column(j).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
        let alpha = (1.0 + 17f64.sqrt()) / 8.0;
        let mut w = a.clone();
        let mut l = DMatrix::<f64>::identity(n, n);
        let mut d_diag = vec![0.0; n];
        let mut d_off = vec![0.0; n];
        let mut block = vec![1u8; n];
        let mut perm: Vec<usize> = (0..n).collect();
        let tiny = f64::MIN_POSITIVE.sqrt() * norm1.max(1.0);

        let mut k = 0;
        while k < n {
            let absakk = w[(k, k)].abs();
            let (imax, colmax) = ((k + 1)..n)
                .map(|i| (i, w[(i, k)].abs()))
                .fold((k, 0.0), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
            if absakk.max(colmax) <= tiny {
                return Err(Error::Singular(format!("zero pivot at column {k} of the KKT matrix")));
            }
            let (kp, kstep) = if absakk >= alpha * colmax {
                (k, 1)
            } else {
                let rowmax = (k..n)
                    .filter(|&j| j != imax)
                    .map(|j| w[(imax, j)].abs())
                    .fold(0.0, f64::max);
                if absakk * rowmax >= alpha * colmax * colmax {
                    (k, 1)
                } else if w[(imax, imax)].abs() >= alpha * rowmax {
                    (imax, 1)
                } else {
                    (imax, 2)
                }
            };
            let kk = k + kstep - 1;
            if kp != kk {
                w.swap_rows(kk, kp);
                w.swap_columns(kk, kp);
                perm.swap(kk, kp);
                for c in 0..k {
                    let t = l[(kk, c)];
                    l[(kk, c)] = l[(kp, c)];
                    l[(kp, c)] = t;
                }
            }
            if kstep == 1 {
                let dkk = w[(k, k)];
                if dkk.abs() <= tiny {
                    return Err(Error::Singular(format!("zero pivot at column {k} of the KKT matrix")));
                }
                d_diag[k] = dkk;
                for i in (k + 1)..n {
                    l[(i, k)] = w[(i, k)] / dkk;
                }
                for j in (k + 1)..n {
                    let lj = l[(j, k)];
                    if lj == 0.0 {
                        continue;
                    }
                    let akj = w[(k, j)];
                    for i in (k + 1)..n {
                        w[(i, j)] -= l[(i, k)] * akj;
                    }
                }
            } else {
                let d11 = w[(k, k)];
                let d21 = w[(k + 1, k)];
                let d22 = w[(k + 1, k + 1)];
                let det = d11 * d22 - d21 * d21;
                if det.abs() <= tiny * tiny {
                    return Err(Error::Singular(format!("singular 2x2 pivot at column {k} of the KKT matrix")));
                }
                let (i11, i12, i22) = (d22 / det, -d21 / det, d11 / det);
                d_diag[k] = d11;
                d_diag[k + 1] = d22;
                d_off[k] = d21;
                block[k] = 2;
                block[k + 1] = 0;
                for i in (k + 2)..n {
                    let (a0, a1) = (w[(i, k)], w[(i, k + 1)]);
                    l[(i, k)] = a0 * i11 + a1 * i12;
                    l[(i, k + 1)] = a0 * i12 + a1 * i22;
                }
                for j in (k + 2)..n {
                    let (b0, b1) = (w[(k, j)], w[(k + 1, j)]);
                    for i in (k + 2)..n {
                        w[(i, j)] -= l[(i, k)] * b0 + l[(i, k + 1)] * b1;
                    }
                }
            }
            k += kstep;
        }
        Ok(Self { l, d_diag, d_off, block, perm, norm1 })
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    /// Solves `A X = B` in place for every column of `b`.
    pub fn solve_mut(&self, b: &mut DMatrix<f64>) {
        let n = self.dim();
        let mut z = DMatrix::<f64>::zeros(n, b.ncols());
        for i in 0..n {
            z.set_row(i, &b.row(self.perm[i]));
        }
        for c in 0..z.ncols() {
            let mut col = z.column_mut(c);
            for j in 0..n {
                let v = col[j];
                if v != 0.0 {
                    for i in (j + 1)..n {
                        col[i] -= self.l[(i, j)] * v;
                    }
                }
            }
            let mut k = 0;
            while k < n {
                if self.block[k] == 2 {
                    let (d11, d21, d22) = (self.d_diag[k], self.d_off[k], self.d_diag[k + 1]);
                    let det = d11 * d22 - d21 * d21;
                    let (r0, r1) = (col[k], col[k + 1]);
                    col[k] = (d22 * r0 - d21 * r1) / det;
                    col[k + 1] = (d11 * r1 - d21 * r0) / det;
                    k += 2;
                } else {
                    col[k] /= self.d_diag[k];
                    k += 1;
                }
            }
            for j in (0..n).rev() {
                let mut acc = col[j];
                for i in (j + 1)..n {
                    acc -= self.l[(i, j)] * col[i];
                }
                col[j] = acc;
            }
        }
        for i in 0..n {
            b.set_row(self.perm[i], &z.row(i));
        }
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut m = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        self.solve_mut(&mut m);
        DVector::from_column_slice(m.as_slice())
    }

    /// 1-norm condition estimate `||A||_1 * est(||A^{-1}||_1)` by Hager's method.
    pub fn condition_estimate(&self) -> f64 {
        let n = self.dim();
        if n == 0 {
            return 1.0;
        }
        let mut x = DVector::from_element(n, 1.0 / n as f64);
        let mut est = 0.0;
        for _ in 0..5 {
            let y = self.solve_vec(&x);
            est = y.iter().map(|v| v.abs()).sum::<f64>();
            if !est.is_finite() {
                return f64::INFINITY;
            }
            let xi = y.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
            let z = self.solve_vec(&xi);
            let (jmax, zmax) = z
                .iter()
                .enumerate()
                .fold((0, 0.0), |acc, (j, v)| if v.abs() > acc.1 { (j, v.abs()) } else { acc });
            if zmax <= z.dot(&x) {
                break;
            }
            x = DVector::zeros(n);
            x[jmax] = 1.0;
        }
        self.norm1 * est
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn bunch_kaufman_solves_saddle_point_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..40 {
            let n = 3 + trial % 9;
            let k = 1 + trial % 3;
            let m = random_matrix(&mut rng, k, n);
            let mut kkt = DMatrix::zeros(n + k, n + k);
            kkt.view_mut((0, 0), (n, n)).fill_with_identity();
            kkt.view_mut((n, 0), (k, n)).copy_from(&m);
            kkt.view_mut((0, n), (n, k)).copy_from(&m.transpose());
            let f = SymmetricIndefinite::factor(&kkt).unwrap();
            let rhs = random_matrix(&mut rng, n + k, 4);
            let mut x = rhs.clone();
            f.solve_mut(&mut x);
            let lu = kkt.clone().lu().solve(&rhs).unwrap();
            assert!((&x - &lu).amax() < 1e-10, "trial {trial}");
            assert!((&kkt * &x - &rhs).amax() < 1e-10);
        }
    }

    #[test]
    fn bunch_kaufman_handles_zero_diagonal() {
        let a = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 2.0, 1.0, 0.0, 3.0, 2.0, 3.0, 0.0]);
        let f = SymmetricIndefinite::factor(&a).unwrap();
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let x = f.solve_vec(&b);
        assert!((&a * x - b).amax() < 1e-12);
    }

    #[test]
    fn singular_kkt_is_reported() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.0]);
        assert!(SymmetricIndefinite::factor(&a).is_err());
    }

    #[test]
    fn condition_estimate_tracks_true_condition() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-3, -50.0]));
        let f = SymmetricIndefinite::factor(&a).unwrap();
        let c = f.condition_estimate();
        assert!((c / 5e4 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn null_space_is_orthonormal_kernel_with_canonical_signs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_matrix(&mut rng, 2, 6);
        let b = null_space(&g).unwrap();
        assert_eq!(b.shape(), (6, 4));
        assert!((&g * &b).amax() < 1e-12);
        assert!((b.tr_mul(&b) - DMatrix::identity(4, 4)).amax() < 1e-12);
        for j in 0..4 {
            let lead = b.column(j).iter().copied().find(|v| v.abs() > 1e-10).unwrap();
            assert!(lead > 0.0);
        }
    }

    #[test]
    fn null_space_rejects_rank_deficiency() {
        let g = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        assert!(null_space(&g).is_err());
    }

    #[test]
    fn principal_angles_of_identical_spans_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_matrix(&mut rng, 1, 4);
        let b = null_space(&g).unwrap();
        let rotated = &b * DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, -1.0]);
        assert!(principal_angles(&b, &rotated).iter().all(|a| *a < 1e-7));
    }
}
