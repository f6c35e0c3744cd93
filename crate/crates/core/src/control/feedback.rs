//! Stabilizing actuator feedback for plants with unstable or slow modes, and
//! the transfer filter `K(s) = (sI - Lambda)^-1 H` it induces.

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};

use crate::cassm::complex_pairs;
use crate::error::{Error, Result};
use crate::linalg;

/// Result of [`design_feedback`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedbackDesign {
    #[serde(with = "crate::serde_mat")]
    pub k: DMatrix<f64>,
    #[serde(with = "crate::serde_mat")]
    pub h: DMatrix<f64>,
    pub beta: f64,
    /// `||K A_u||_2`.
    pub margin: f64,
    /// Eigenvalues of `[[A, A_u], [H, Lambda]]` as `[re, im]`.
    pub spectrum: Vec<[f64; 2]>,
}

/// Solves the continuous algebraic Riccati equation
/// `A'P + PA - P B R^-1 B' P + Q = 0` with the matrix sign function of the
/// Hamiltonian.
pub fn care(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let r_inv = r.clone().try_inverse().ok_or_else(|| Error::Numerical("input weight is singular".into()))?;
    let g = b * r_inv * b.transpose();
    let mut ham = DMatrix::zeros(2 * n, 2 * n);
    ham.view_mut((0, 0), (n, n)).copy_from(a);
    ham.view_mut((0, n), (n, n)).copy_from(&(-&g));
    ham.view_mut((n, 0), (n, n)).copy_from(&(-q));
    ham.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    let z = linalg::matrix_sign(&ham)?;
    let w11 = z.view((0, 0), (n, n));
    let w12 = z.view((0, n), (n, n));
    let w21 = z.view((n, 0), (n, n));
    let w22 = z.view((n, n), (n, n));
    let eye = DMatrix::<f64>::identity(n, n);
    let mut lhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&w12);
    lhs.view_mut((n, 0), (n, n)).copy_from(&(w22 + &eye));
    let mut rhs = DMatrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(-(w11 + &eye)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-w21));
    let p = linalg::pinv(&lhs) * rhs;
    let p = (&p + p.transpose()) * 0.5;
    if !linalg::all_finite(p.as_slice()) {
        return Err(Error::Numerical("Riccati solution is not finite".into()));
    }
    Ok(p)
}

/// PBH test: returns the first eigenvalue with `Re >= 0` that `b` cannot reach.
fn uncontrollable_unstable_mode(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<Complex<f64>> {
    let n = a.nrows();
    let m = b.ncols();
    let scale = a.norm().max(b.norm()).max(1.0);
    for lam in linalg::eigenvalues(a) {
        if lam.re < -1e-9 * scale {
            continue;
        }
        let pbh = DMatrix::from_fn(n, n + m, |i, j| {
            if j < n {
                let d = if i == j { lam } else { Complex::new(0.0, 0.0) };
                d - Complex::new(a[(i, j)], 0.0)
            } else {
                Complex::new(b[(i, j - n)], 0.0)
            }
        });
        let smin = pbh.singular_values().iter().cloned().fold(f64::INFINITY, f64::min);
        if smin < 1e-9 * scale {
            return Some(lam);
        }
    }
    None
}

/// LQR gain with the sign convention `A + B K` Hurwitz.
pub fn lqr(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(lam) = uncontrollable_unstable_mode(a, b) {
        return Err(Error::Unstabilizable { re: lam.re, im: lam.im });
    }
    let p = care(a, b, q, r)?;
    let r_inv = r.clone().try_inverse().ok_or_else(|| Error::Numerical("input weight is singular".into()))?;
    Ok(-(r_inv * b.transpose() * p))
}

/// `[[A, A_u], [H, Lambda]]`.
pub fn closed_loop_matrix(a: &DMatrix<f64>, a_u: &DMatrix<f64>, h: &DMatrix<f64>, lambda: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let m = lambda.nrows();
    let mut out = DMatrix::zeros(n + m, n + m);
    out.view_mut((0, 0), (n, n)).copy_from(a);
    out.view_mut((0, n), (n, m)).copy_from(a_u);
    out.view_mut((n, 0), (m, n)).copy_from(h);
    out.view_mut((n, n), (m, m)).copy_from(lambda);
    out
}

/// Actuator bandwidth `beta` with `Lambda <= -beta I`, from the symmetric part.
pub fn actuator_bandwidth(lambda: &DMatrix<f64>) -> f64 {
    let sym = (lambda + lambda.transpose()) * 0.5;
    -sym.symmetric_eigenvalues().iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Builds `H = K A - Lambda K + K A_u K` from an LQR gain `K` (unit weights)
/// and checks the bandwidth margin `||K A_u||_2 < beta`.
pub fn design_feedback(a: &DMatrix<f64>, a_u: &DMatrix<f64>, lambda: &DMatrix<f64>) -> Result<FeedbackDesign> {
    let n = a.nrows();
    let m = lambda.nrows();
    crate::error::check_dim("A_u rows", n, a_u.nrows())?;
    crate::error::check_dim("A_u columns", m, a_u.ncols())?;
    let beta = actuator_bandwidth(lambda);
    if !(beta > 0.0) {
        return Err(Error::Parameter(format!("Lambda is not uniformly dissipative (beta = {beta:.3e})")));
    }
    let k = lqr(a, a_u, &DMatrix::identity(n, n), &DMatrix::identity(m, m))?;
    design_with_gain(a, a_u, lambda, k)
}

/// [`design_feedback`] for a given stabilizing `K`.
pub fn design_with_gain(a: &DMatrix<f64>, a_u: &DMatrix<f64>, lambda: &DMatrix<f64>, k: DMatrix<f64>) -> Result<FeedbackDesign> {
    let beta = actuator_bandwidth(lambda);
    let margin = linalg::spectral_norm(&(&k * a_u));
    if margin >= beta {
        return Err(Error::InsufficientBandwidth { margin, beta });
    }
    let h = &k * a - lambda * &k + &k * a_u * &k;
    let closed = closed_loop_matrix(a, a_u, &h, lambda);
    let ev = linalg::sorted_eigenvalues(&closed);
    if ev.iter().any(|l| l.re >= 0.0) {
        return Err(Error::Numerical("closed-loop matrix is not Hurwitz despite the margin".into()));
    }
    Ok(FeedbackDesign { k, h, beta, margin, spectrum: complex_pairs(&ev) })
}

/// Lower-left block of `T Ã T^-1` with `T = [[I, 0], [-K, I]]`.
pub fn similarity_lower_left(design: &FeedbackDesign, a: &DMatrix<f64>, a_u: &DMatrix<f64>, lambda: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let m = lambda.nrows();
    let closed = closed_loop_matrix(a, a_u, &design.h, lambda);
    let mut t = DMatrix::identity(n + m, n + m);
    let mut t_inv = DMatrix::identity(n + m, n + m);
    t.view_mut((n, 0), (m, n)).copy_from(&(-&design.k));
    t_inv.view_mut((n, 0), (m, n)).copy_from(&design.k);
    (t * closed * t_inv).view((n, 0), (m, n)).into_owned()
}

/// `K(i omega) = (i omega I - Lambda)^-1 H`.
pub fn filter_matrix(h: &DMatrix<f64>, lambda: &DMatrix<f64>, omega: f64) -> Result<DMatrix<Complex<f64>>> {
    let m = lambda.nrows();
    let s = DMatrix::from_fn(m, m, |i, j| {
        let d = if i == j { Complex::new(0.0, omega) } else { Complex::new(0.0, 0.0) };
        d - Complex::new(lambda[(i, j)], 0.0)
    });
    let hc = h.map(|x| Complex::new(x, 0.0));
    s.lu().solve(&hc).ok_or_else(|| Error::Numerical(format!("sI - Lambda singular at omega = {omega}")))
}

/// Gain curve of the feedback filter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterResponse {
    pub omega: Vec<f64>,
    pub gain: Vec<f64>,
    /// `||Lambda^-1 H||_2`.
    pub dc_gain: f64,
    /// `max |K(0) - (-Lambda^-1 H)|`.
    pub dc_error: f64,
    /// Whether the gain is non-increasing on grid points beyond `10 beta`.
    pub monotone_tail: bool,
}

pub fn feedback_filter_response(h: &DMatrix<f64>, lambda: &DMatrix<f64>, omega: &[f64]) -> Result<FilterResponse> {
    if !linalg::is_hurwitz(lambda) {
        return Err(Error::Parameter("Lambda must be Hurwitz".into()));
    }
    let lam_inv = lambda.clone().try_inverse().ok_or_else(|| Error::Numerical("Lambda is singular".into()))?;
    let dc = -(&lam_inv * h);
    let k0 = filter_matrix(h, lambda, 0.0)?;
    let dc_error = k0.iter().zip(dc.iter()).map(|(a, b)| (a - Complex::new(*b, 0.0)).norm()).fold(0.0, f64::max);
    let gain = omega.iter().map(|&w| filter_matrix(h, lambda, w).map(|k| linalg::spectral_norm_complex(&k))).collect::<Result<Vec<_>>>()?;
    let beta = actuator_bandwidth(lambda);
    let tail: Vec<f64> = omega.iter().zip(&gain).filter(|(w, _)| **w >= 10.0 * beta).map(|(_, g)| *g).collect();
    let monotone_tail = tail.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-300);
    Ok(FilterResponse { omega: omega.to_vec(), gain, dc_gain: linalg::spectral_norm(&dc), dc_error, monotone_tail })
}
