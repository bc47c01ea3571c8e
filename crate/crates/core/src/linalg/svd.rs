//! Thin SVD by Householder QR followed by one-sided (Hestenes) Jacobi on the
//! triangular factor, plus the rank measures built on it.

use serde::{Deserialize, Serialize};

use super::matrix::{dot, norm2, DenseMatrix};
use crate::error::{Error, Result};

/// Default relative tolerance for [`numeric_rank`].
pub const DEFAULT_RANK_TOL: f64 = 1e-9;

const MAX_SWEEPS: usize = 80;
const JACOBI_TOL: f64 = 4.0 * f64::EPSILON;

/// `m = u · diag(sigma) · vt` with `k = min(rows, cols)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvdResult {
    pub u: DenseMatrix,
    pub sigma: Vec<f64>,
    pub vt: DenseMatrix,
}

impl SvdResult {
    pub fn rank_k(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        self.u.scale_cols(&self.sigma).matmul(&self.vt).expect("svd factors are conformant")
    }
}

/// Thin SVD with singular values sorted nonincreasing.
///
/// Sign convention: the largest-magnitude entry of every column of `u` is
/// nonnegative (first occurrence wins ties); the matching row of `vt` absorbs
/// the flip.
pub fn svd_thin(m: &DenseMatrix) -> Result<SvdResult> {
    if !m.is_finite() {
        return Err(Error::Domain("svd input has non-finite entries".into()));
    }
    let (rows, cols) = m.shape();
    let (mut ucols, sigma, mut vcols) = if rows >= cols {
        svd_tall(m)?
    } else {
        let (u, s, v) = svd_tall(&m.transpose())?;
        (v, s, u)
    };

    for (uc, vc) in ucols.iter_mut().zip(vcols.iter_mut()) {
        let mut best = 0;
        for (i, x) in uc.iter().enumerate() {
            if x.abs() > uc[best].abs() {
                best = i;
            }
        }
        if uc.get(best).is_some_and(|&x| x < 0.0) {
            uc.iter_mut().for_each(|x| *x = -*x);
            vc.iter_mut().for_each(|x| *x = -*x);
        }
    }

    let k = sigma.len();
    let u = DenseMatrix::from_fn(rows, k, |i, j| ucols[j][i]);
    let vt = DenseMatrix::from_fn(k, cols, |i, j| vcols[i][j]);
    Ok(SvdResult { u, sigma, vt })
}

/// Returns (columns of U, sigma, columns of V) for a matrix with rows ≥ cols.
fn svd_tall(a: &DenseMatrix) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>)> {
    let (m, n) = a.shape();
    if n == 0 {
        return Ok((Vec::new(), Vec::new(), Vec::new()));
    }

    // Householder QR, column-major working copy.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    let mut reflectors: Vec<Option<(Vec<f64>, f64)>> = Vec::with_capacity(n);
    for j in 0..n {
        let x = &cols[j][j..];
        let xnorm = norm2(x);
        if xnorm == 0.0 {
            reflectors.push(None);
            continue;
        }
        // H = I − τ v vᵀ with v₀ = 1, mapping x to β e₁.
        let beta = if x[0] > 0.0 { -xnorm } else { xnorm };
        let scale = x[0] - beta;
        if scale == 0.0 {
            reflectors.push(None);
            continue;
        }
        let mut v: Vec<f64> = x.iter().map(|e| e / scale).collect();
        v[0] = 1.0;
        let tau = (beta - x[0]) / beta;
        for c in cols.iter_mut().skip(j) {
            apply_reflector(&v, tau, &mut c[j..]);
        }
        reflectors.push(Some((v, tau)));
    }

    // Columns of the n×n upper-triangular factor.
    let mut b: Vec<Vec<f64>> =
        (0..n).map(|j| (0..n).map(|i| if i <= j { cols[j][i] } else { 0.0 }).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect()).collect();

    // Columns at rounding level relative to the whole matrix count as zero.
    let negligible = {
        let total: f64 = b.iter().map(|c| dot(c, c)).sum();
        (f64::EPSILON * f64::EPSILON) * total
    };
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&b[p], &b[p]);
                let beta = dot(&b[q], &b[q]);
                let gamma = dot(&b[p], &b[q]);
                if gamma == 0.0 || alpha.min(beta) <= negligible || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut b, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!("jacobi svd did not converge in {MAX_SWEEPS} sweeps ({m}x{n})")));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = b.iter().map(|c| norm2(c)).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).expect("finite norms"));

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    // Directions of rounding-level columns are noise; they are rebuilt as an
    // orthogonal complement instead.
    let floor = (n as f64) * f64::EPSILON * sigma[0];
    let mut ur: Vec<Option<Vec<f64>>> = order
        .iter()
        .map(|&j| {
            let s = norms[j];
            (s > floor.max(f64::MIN_POSITIVE)).then(|| b[j].iter().map(|x| x / s).collect())
        })
        .collect();
    complete_basis(&mut ur, n);
    let vcols: Vec<Vec<f64>> = order.iter().map(|&j| v[j].clone()).collect();

    // U = Q · U_R, Q applied as the product of stored reflectors.
    let ucols = ur
        .into_iter()
        .map(|c| {
            let mut full = c.expect("basis completed");
            full.resize(m, 0.0);
            for (j, h) in reflectors.iter().enumerate().rev() {
                if let Some((h, tau)) = h {
                    apply_reflector(h, *tau, &mut full[j..]);
                }
            }
            full
        })
        .collect();

    Ok((ucols, sigma, vcols))
}

#[inline]
fn apply_reflector(v: &[f64], tau: f64, x: &mut [f64]) {
    let d = tau * dot(v, x);
    if d != 0.0 {
        x.iter_mut().zip(v).for_each(|(xi, vi)| *xi -= d * vi);
    }
}

#[inline]
fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills `None` slots with unit vectors orthogonal to every other column.
fn complete_basis(cols: &mut [Option<Vec<f64>>], n: usize) {
    for slot in 0..cols.len() {
        if cols[slot].is_some() {
            continue;
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..n {
            let mut cand = vec![0.0; n];
            cand[e] = 1.0;
            for _ in 0..2 {
                for other in cols.iter().flatten() {
                    let d = dot(other, &cand);
                    cand.iter_mut().zip(other).for_each(|(c, o)| *c -= d * o);
                }
            }
            let nrm = norm2(&cand);
            if best.as_ref().is_none_or(|(bn, _)| nrm > *bn) {
                best = Some((nrm, cand));
            }
        }
        let (nrm, mut cand) = best.expect("n > 0");
        cand.iter_mut().for_each(|c| *c /= nrm);
        cols[slot] = Some(cand);
    }
}

/// Number of singular values above `rel_tol · σ₁`; zero for the zero matrix.
pub fn numeric_rank(m: &DenseMatrix, rel_tol: f64) -> Result<usize> {
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(Error::Domain(format!("rel_tol {rel_tol} outside (0, 1)")));
    }
    let sigma = svd_thin(m)?.sigma;
    Ok(rank_from_spectrum(&sigma, rel_tol))
}

pub(crate) fn rank_from_spectrum(sigma: &[f64], rel_tol: f64) -> usize {
    match sigma.first() {
        Some(&s1) if s1 > 0.0 => sigma.iter().filter(|&&s| s > rel_tol * s1).count(),
        _ => 0,
    }
}

/// Entropy effective rank `exp(-Σ pᵢ ln pᵢ)` with `pᵢ = σᵢ / Σσⱼ`.
pub fn effective_rank(m: &DenseMatrix) -> Result<f64> {
    let sigma = svd_thin(m)?.sigma;
    effective_rank_from_spectrum(&sigma)
}

pub(crate) fn effective_rank_from_spectrum(sigma: &[f64]) -> Result<f64> {
    let total: f64 = sigma.iter().sum();
    if total <= 0.0 {
        return Err(Error::Domain("effective rank of a zero matrix".into()));
    }
    let entropy: f64 = sigma.iter().map(|s| s / total).filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum();
    Ok(entropy.exp().clamp(1.0, sigma.len() as f64))
}

/// Stable rank `‖M‖_F² / σ₁²`.
pub fn stable_rank(m: &DenseMatrix) -> Result<f64> {
    let sigma = svd_thin(m)?.sigma;
    match sigma.first() {
        Some(&s1) if s1 > 0.0 => Ok(sigma.iter().map(|s| s * s).sum::<f64>() / (s1 * s1)),
        _ => Err(Error::Domain("stable rank of a zero matrix".into())),
    }
}

/// Orthonormal basis of `col(m)`, one column per singular value above
/// `rel_tol · σ₁`.
pub fn orthonormal_basis(m: &DenseMatrix, rel_tol: f64) -> Result<DenseMatrix> {
    let svd = svd_thin(m)?;
    let r = rank_from_spectrum(&svd.sigma, rel_tol);
    Ok(svd.u.col_block(0, r))
}

/// `‖UᵀU − I‖_F`.
pub fn orthonormality_defect(u: &DenseMatrix) -> f64 {
    let gram = u.t_matmul(u).expect("square gram");
    gram.sub(&DenseMatrix::identity(u.cols())).expect("same shape").frobenius_norm()
}

/// Minimum-norm least-squares solution of `a z ≈ t` via the pseudo-inverse,
/// discarding singular values at or below `rcond · σ₁`.
pub fn lstsq(a: &DenseMatrix, t: &[f64], rcond: f64) -> Result<Vec<f64>> {
    if t.len() != a.rows() {
        return Err(Error::dim("lstsq right-hand side length"));
    }
    let svd = svd_thin(a)?;
    let cut = svd.sigma.first().copied().unwrap_or(0.0) * rcond;
    let ut_t = svd.u.t_matvec(t)?;
    let coef: Vec<f64> = ut_t.iter().zip(&svd.sigma).map(|(c, &s)| if s > cut { c / s } else { 0.0 }).collect();
    svd.vt.t_matvec(&coef)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gaussian;

    fn check_factorization(m: &DenseMatrix) {
        let svd = svd_thin(m).unwrap();
        let k = m.rows().min(m.cols());
        assert_eq!(svd.sigma.len(), k);
        assert!(svd.sigma.windows(2).all(|w| w[0] >= w[1]));
        assert!(svd.sigma.iter().all(|&s| s >= 0.0));
        let tol = 1e-10 * (k as f64).sqrt();
        assert!(orthonormality_defect(&svd.u) <= tol);
        assert!(orthonormality_defect(&svd.vt.transpose()) <= tol);
        let resid = svd.reconstruct().sub(m).unwrap().frobenius_norm();
        assert!(resid <= 1e-9 * m.frobenius_norm().max(1.0), "resid {resid}");
    }

    #[test]
    fn identity_svd() {
        let svd = svd_thin(&DenseMatrix::identity(3)).unwrap();
        assert_eq!(svd.sigma, vec![1.0, 1.0, 1.0]);
        assert_eq!(svd.u, DenseMatrix::identity(3));
        assert_eq!(svd.vt, DenseMatrix::identity(3));
    }

    #[test]
    fn diagonal_with_zero() {
        let m = DenseMatrix::from_diag(&[3.0, 0.0]);
        let svd = svd_thin(&m).unwrap();
        assert_eq!(svd.sigma, vec![3.0, 0.0]);
        check_factorization(&m);
    }

    #[test]
    fn gaussian_shapes() {
        for (i, &(r, c)) in [(5, 3), (3, 5), (1, 7), (7, 1), (16, 16), (40, 9)].iter().enumerate() {
            check_factorization(&gaussian(r, c, 100 + i as u64, 1.0));
        }
    }

    #[test]
    fn zero_and_rank_deficient() {
        check_factorization(&DenseMatrix::zeros(4, 3));
        let u = [1.0, 2.0, -1.0, 0.5];
        let v = [0.3, -0.7, 2.0];
        let m = DenseMatrix::outer(&u, &v);
        check_factorization(&m);
        assert_eq!(numeric_rank(&m, DEFAULT_RANK_TOL).unwrap(), 1);
    }

    #[test]
    fn sign_convention() {
        let svd = svd_thin(&gaussian(6, 4, 3, 1.0)).unwrap();
        for j in 0..svd.u.cols() {
            let col = svd.u.col(j);
            let big = col.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(big >= 0.0);
        }
        // deterministic
        assert_eq!(svd, svd_thin(&gaussian(6, 4, 3, 1.0)).unwrap());
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut m = DenseMatrix::identity(2);
        m.set(0, 1, f64::NAN);
        assert!(matches!(svd_thin(&m), Err(Error::Domain(_))));
    }

    #[test]
    fn rank_measures() {
        assert_eq!(numeric_rank(&DenseMatrix::zeros(4, 4), 1e-9).unwrap(), 0);
        assert!(numeric_rank(&DenseMatrix::identity(2), 0.0).is_err());
        assert!(numeric_rank(&DenseMatrix::identity(2), 1.0).is_err());
        assert!((effective_rank(&DenseMatrix::identity(4)).unwrap() - 4.0).abs() < 1e-12);
        let r1 = DenseMatrix::outer(&[1.0, 2.0], &[3.0, 1.0, 1.0]);
        assert!((effective_rank(&r1).unwrap() - 1.0).abs() < 1e-12);
        let d = DenseMatrix::from_diag(&[2.0, 2.0, 0.0, 0.0]);
        assert!((effective_rank(&d).unwrap() - 2.0).abs() < 1e-12);
        assert!(effective_rank(&DenseMatrix::zeros(3, 3)).is_err());
        assert!((stable_rank(&d).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn lstsq_recovers_exact_solution() {
        let a = gaussian(20, 5, 9, 1.0);
        let z = [1.0, -2.0, 0.5, 3.0, 0.0];
        let t = a.matvec(&z).unwrap();
        let got = lstsq(&a, &t, 1e-12).unwrap();
        for (g, e) in got.iter().zip(z) {
            assert!((g - e).abs() < 1e-10);
        }
    }

    #[test]
    fn basis_of_rank_two() {
        let a = gaussian(6, 2, 1, 1.0).matmul(&gaussian(2, 5, 2, 1.0)).unwrap();
        let q = orthonormal_basis(&a, 1e-9).unwrap();
        assert_eq!(q.shape(), (6, 2));
        assert!(orthonormality_defect(&q) < 1e-12);
    }
}
