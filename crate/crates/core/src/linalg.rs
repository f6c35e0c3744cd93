//! Dense linear-algebra helpers shared by the fitting and control code.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};

/// Condition number above which a regression emits a warning.
pub const ILL_CONDITIONED: f64 = 1e12;

/// Ridge least squares `min ||features * theta - targets||^2 + ridge * rows * ||theta||^2`.
///
/// `features` is `rows x p`, `targets` is `rows x q`; returns `theta` as `p x q`.
/// The penalty scales with the row count so `ridge` is independent of dataset size.
pub fn ridge_solve(features: &DMatrix<f64>, targets: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    if features.nrows() != targets.nrows() {
        return Err(Error::Dimension {
            what: "ridge regression rows".into(),
            expected: features.nrows(),
            got: targets.nrows(),
        });
    }
    let rows = features.nrows().max(1) as f64;
    let mut gram = features.tr_mul(features);
    let rhs = features.tr_mul(targets);
    solve_normal_equations(&mut gram, rhs, ridge * rows)
}

/// Solves `(gram + shift I) x = rhs` by Cholesky, escalating the shift when the
/// factorization fails.
pub fn solve_normal_equations(gram: &mut DMatrix<f64>, rhs: DMatrix<f64>, shift: f64) -> Result<DMatrix<f64>> {
    let p = gram.nrows();
    if p == 0 {
        return Ok(DMatrix::zeros(0, rhs.ncols()));
    }
    let scale = (0..p).map(|i| gram[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut extra = 0.0;
    for attempt in 0..8 {
        let mut a = gram.clone();
        for i in 0..p {
            a[(i, i)] += shift + extra;
        }
        if let Some(chol) = a.cholesky() {
            let l = chol.l_dirty();
            let dmax = (0..p).map(|i| l[(i, i)]).fold(0.0, f64::max);
            let dmin = (0..p).map(|i| l[(i, i)]).fold(f64::INFINITY, f64::min);
            let cond = (dmax / dmin).powi(2);
            if cond > ILL_CONDITIONED {
                log::warn!("normal equations ill-conditioned (cond ~ {cond:.3e}); ridge shift {:.3e}", shift + extra);
            }
            return Ok(chol.solve(&rhs));
        }
        extra = if attempt == 0 { scale * 1e-14 } else { extra * 100.0 };
        log::warn!("cholesky failed; retrying with extra regularization {extra:.3e}");
    }
    Err(Error::Numerical("normal equations could not be factorized".into()))
}

/// Moore-Penrose pseudoinverse with relative singular-value cutoff.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = smax * (m.nrows().max(m.ncols()) as f64) * f64::EPSILON;
    svd.pseudo_inverse(tol).expect("svd computed with both factors")
}

/// Numerical rank using the same cutoff as [`pinv`].
pub fn rank(m: &DMatrix<f64>) -> usize {
    let sv = m.singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let tol = smax * (m.nrows().max(m.ncols()) as f64) * f64::EPSILON;
    sv.iter().filter(|&&s| s > tol).count()
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().iter().cloned().fold(0.0, f64::max)
}

pub fn spectral_norm_complex(m: &DMatrix<Complex<f64>>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().iter().cloned().fold(0.0, f64::max)
}

/// Eigenvalues of a general real square matrix.
pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex<f64>> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    m.complex_eigenvalues().iter().cloned().collect()
}

/// Largest real part over the spectrum (spectral abscissa).
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    eigenvalues(m).iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max)
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    eigenvalues(m).iter().map(|l| l.norm()).fold(0.0, f64::max)
}

pub fn is_hurwitz(m: &DMatrix<f64>) -> bool {
    spectral_abscissa(m) < 0.0
}

/// Eigenvalues sorted by descending real part, then descending imaginary part.
pub fn sorted_eigenvalues(m: &DMatrix<f64>) -> Vec<Complex<f64>> {
    let mut ev = eigenvalues(m);
    ev.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
    ev
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let s = a[(i, j)];
            if s != 0.0 {
                out.view_mut((i * br, j * bc), (br, bc)).copy_from(&(b * s));
            }
        }
    }
    out
}

/// Stacks column vectors as the rows of a matrix.
pub fn rows_to_matrix(rows: &[DVector<f64>]) -> DMatrix<f64> {
    let ncols = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j])
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Root-mean-square of the entries of a slice.
pub fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix.
pub fn max_eigenvalue_psd(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    m.clone().symmetric_eigenvalues().iter().cloned().fold(0.0, f64::max)
}

/// Matrix sign function by the scaled Newton iteration. Fails when an
/// eigenvalue lies on the imaginary axis.
pub fn matrix_sign(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let mut z = m.clone();
    for _ in 0..100 {
        let lu = z.clone().lu();
        let det = lu.determinant();
        let inv = lu.try_inverse().ok_or_else(|| Error::Numerical("matrix sign: eigenvalue on the imaginary axis".into()))?;
        let c = det.abs().powf(-1.0 / n as f64);
        let c = if c.is_finite() && c > 0.0 { c } else { 1.0 };
        let next = (&z * c + inv / c) * 0.5;
        let change = (&next - &z).norm() / next.norm();
        z = next;
        if change < 1e-13 {
            return Ok(z);
        }
    }
    log::warn!("matrix sign iteration did not reach full convergence");
    Ok(z)
}

/// Real basis `E` (orthonormal columns) of the invariant subspace of the `k`
/// rightmost eigenvalues, with `k >= k_min` grown until the next eigenvalue
/// is strictly further left, and the restricted matrix `E' A E`.
pub fn slow_invariant_subspace(a: &DMatrix<f64>, k_min: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    let ev = sorted_eigenvalues(a);
    if k_min == 0 || k_min > n {
        return Err(Error::Parameter(format!("subspace dimension {k_min} out of range for {n} states")));
    }
    let scale = ev.iter().map(|l| l.re.abs()).fold(1.0, f64::max);
    let mut k = k_min;
    while k < n && ev[k - 1].re - ev[k].re <= 1e-6 * scale {
        k += 1;
    }
    if k == n {
        return Ok((DMatrix::identity(n, n), a.clone()));
    }
    let sigma = 0.5 * (ev[k - 1].re + ev[k].re);
    let shifted = a - DMatrix::identity(n, n) * sigma;
    let proj = (DMatrix::identity(n, n) + matrix_sign(&shifted)?) * 0.5;
    let svd = proj.svd(true, false);
    let u = svd.u.ok_or_else(|| Error::Numerical("projector SVD failed".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let e = DMatrix::from_fn(n, k, |r, c| u[(r, order[c])]);
    let restricted = e.transpose() * a * &e;
    Ok((e, restricted))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ridge_recovers_exact_linear_map() {
        let x = DMatrix::from_fn(40, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let truth = DMatrix::from_row_slice(3, 2, &[1.0, -2.0, 0.5, 3.0, -1.5, 0.25]);
        let y = &x * &truth;
        let fit = ridge_solve(&x, &y, 0.0).unwrap();
        assert!((fit - truth).norm() < 1e-10);
    }

    #[test]
    fn pinv_of_identity_is_identity() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert!((pinv(&i) - &i).norm() < 1e-15);
    }

    #[test]
    fn kron_shape_and_blocks() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = DMatrix::<f64>::identity(2, 2);
        let k = kron(&a, &b);
        assert_eq!(k.shape(), (4, 4));
        assert_eq!(k[(2, 0)], 3.0);
        assert_eq!(k[(3, 1)], 3.0);
        assert_eq!(k[(2, 1)], 0.0);
    }

    #[test]
    fn abscissa_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -3.0, 0.5]));
        assert!((spectral_abscissa(&m) - 0.5).abs() < 1e-12);
        assert!(!is_hurwitz(&m));
    }

    #[test]
    fn slow_subspace_of_block_triangular() {
        let a = DMatrix::from_row_slice(4, 4, &[-1.0, 2.0, 0.3, 0.0, -2.0, -1.0, 0.0, 0.1, 0.0, 0.0, -5.0, 0.0, 0.0, 0.0, 0.0, -9.0]);
        let (e, r) = slow_invariant_subspace(&a, 1).unwrap();
        // The complex pair is never split.
        assert_eq!(e.ncols(), 2);
        assert!((&a * &e - &e * &r).norm() < 1e-10);
        let ev = sorted_eigenvalues(&r);
        assert!((ev[0].re + 1.0).abs() < 1e-10 && (ev[0].im.abs() - 2.0).abs() < 1e-10);
    }
}
