//! Nonlinear feature maps for the manifold parameterization and the reduced
//! vector field: graded-lex polynomial monomials and random Fourier features.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serde_mat;

/// Upper bound on the number of generated monomials.
pub const MAX_MONOMIALS: usize = 1_000_000;

/// Monomials of total degree in `[degree_lo, degree_hi]` over `n` variables.
///
/// Ordering is graded-lexicographic: by degree, then by descending exponent
/// of `z1`, then `z2`, and so on. For `n = 2`, degree 2 gives
/// `z1^2, z1 z2, z2^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolyRepr", into = "PolyRepr")]
pub struct Polynomial {
    n: usize,
    degree_lo: usize,
    degree_hi: usize,
    /// Variable indices of each monomial with repetition, e.g. `[0, 0, 1]` for `z1^2 z2`.
    factors: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct PolyRepr {
    n: usize,
    degree_lo: usize,
    degree_hi: usize,
}

impl TryFrom<PolyRepr> for Polynomial {
    type Error = Error;
    fn try_from(r: PolyRepr) -> Result<Self> {
        Polynomial::new(r.n, r.degree_lo, r.degree_hi)
    }
}

impl From<Polynomial> for PolyRepr {
    fn from(p: Polynomial) -> Self {
        PolyRepr { n: p.n, degree_lo: p.degree_lo, degree_hi: p.degree_hi }
    }
}

fn binomial(n: usize, k: usize) -> Option<usize> {
    let k = k.min(n - k.min(n));
    let mut acc: usize = 1;
    for i in 0..k {
        acc = acc.checked_mul(n - i)? / (i + 1);
    }
    Some(acc)
}

/// Number of monomials of total degree in `[lo, hi]` over `n` variables.
pub fn monomial_count(n: usize, lo: usize, hi: usize) -> Option<usize> {
    let mut total: usize = 0;
    for d in lo..=hi {
        total = total.checked_add(binomial(n + d - 1, d)?)?;
    }
    Some(total)
}

fn push_monomials(n: usize, degree: usize, start: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if current.len() == degree {
        out.push(current.clone());
        return;
    }
    for v in start..n {
        current.push(v);
        push_monomials(n, degree, v, current, out);
        current.pop();
    }
}

impl Polynomial {
    pub fn new(n: usize, degree_lo: usize, degree_hi: usize) -> Result<Self> {
        if degree_lo < 2 || degree_hi < degree_lo {
            return Err(Error::Parameter(format!("polynomial degree range [{degree_lo}, {degree_hi}] must satisfy 2 <= lo <= hi")));
        }
        if n == 0 {
            return Err(Error::Parameter("polynomial features need at least one variable".into()));
        }
        match monomial_count(n, degree_lo, degree_hi) {
            Some(c) if c <= MAX_MONOMIALS => {}
            _ => {
                return Err(Error::Parameter(format!(
                    "{n} variables with degrees [{degree_lo}, {degree_hi}] exceed {MAX_MONOMIALS} monomials"
                )))
            }
        }
        let mut factors = Vec::new();
        for d in degree_lo..=degree_hi {
            push_monomials(n, d, 0, &mut Vec::with_capacity(d), &mut factors);
        }
        Ok(Polynomial { n, degree_lo, degree_hi, factors })
    }

    pub fn degrees(&self) -> (usize, usize) {
        (self.degree_lo, self.degree_hi)
    }

    /// Exponent vector of every monomial, in feature order.
    pub fn exponents(&self) -> Vec<Vec<usize>> {
        self.factors
            .iter()
            .map(|f| {
                let mut e = vec![0; self.n];
                f.iter().for_each(|&v| e[v] += 1);
                e
            })
            .collect()
    }

    fn eval(&self, z: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.factors.len(), self.factors.iter().map(|f| f.iter().map(|&v| z[v]).product::<f64>()))
    }

    fn jacobian(&self, z: &[f64]) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.factors.len(), self.n);
        for (row, f) in self.factors.iter().enumerate() {
            // Product rule over the repeated-factor list.
            for skip in 0..f.len() {
                let p: f64 = f.iter().enumerate().filter(|&(i, _)| i != skip).map(|(_, &v)| z[v]).product();
                jac[(row, f[skip])] += p;
            }
        }
        jac
    }
}

/// Frozen random Fourier features `sqrt(2/D) cos(omega z + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rff {
    pub length_scale: f64,
    pub seed: u64,
    /// `D x n` frequencies.
    #[serde(with = "serde_mat")]
    pub omega: DMatrix<f64>,
    #[serde(with = "serde_mat::vector")]
    pub b: DVector<f64>,
}

/// Draws `omega ~ N(0, l^-2 I)` (row-major, `d x n`) and `b ~ U[0, 2 pi)`.
pub fn rff_sample(n: usize, d: usize, length_scale: f64, seed: u64) -> Result<Rff> {
    if d == 0 || !(length_scale > 0.0) {
        return Err(Error::Parameter(format!("rff needs D >= 1 and length scale > 0 (got D = {d}, l = {length_scale})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut omega = DMatrix::zeros(d, n);
    for i in 0..d {
        for j in 0..n {
            let g: f64 = StandardNormal.sample(&mut rng);
            omega[(i, j)] = g / length_scale;
        }
    }
    let b = DVector::from_fn(d, |_, _| rng.random_range(0.0..2.0 * PI));
    Ok(Rff { length_scale, seed, omega, b })
}

impl Rff {
    pub fn d(&self) -> usize {
        self.omega.nrows()
    }

    fn amplitude(&self) -> f64 {
        (2.0 / self.d() as f64).sqrt()
    }

    fn eval(&self, z: &[f64]) -> DVector<f64> {
        let a = self.amplitude();
        let arg = &self.omega * DVector::from_column_slice(z) + &self.b;
        arg.map(|x| a * x.cos())
    }

    fn jacobian(&self, z: &[f64]) -> DMatrix<f64> {
        let a = self.amplitude();
        let arg = &self.omega * DVector::from_column_slice(z) + &self.b;
        let mut jac = self.omega.clone();
        for (i, mut row) in jac.row_iter_mut().enumerate() {
            row *= -a * arg[i].sin();
        }
        jac
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureKind {
    Polynomial(Polynomial),
    Rff(Rff),
}

/// A feature map over `n` reduced coordinates.
///
/// With `centered` set, `phi(0)` is subtracted so fitted maps vanish at the
/// equilibrium; Jacobians are unaffected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub map: FeatureKind,
    pub centered: bool,
    #[serde(with = "serde_mat::vector")]
    offset: DVector<f64>,
}

impl FeatureMap {
    pub fn polynomial(n: usize, degree_lo: usize, degree_hi: usize) -> Result<Self> {
        Ok(Self::from_kind(FeatureKind::Polynomial(Polynomial::new(n, degree_lo, degree_hi)?), false))
    }

    pub fn rff(n: usize, d: usize, length_scale: f64, seed: u64, centered: bool) -> Result<Self> {
        Ok(Self::from_kind(FeatureKind::Rff(rff_sample(n, d, length_scale, seed)?), centered))
    }

    pub fn from_kind(map: FeatureKind, centered: bool) -> Self {
        let mut f = FeatureMap { map, centered: false, offset: DVector::zeros(0) };
        let n = f.n_inputs();
        f.offset = if centered { f.raw(&vec![0.0; n]) } else { DVector::zeros(f.len()) };
        f.centered = centered;
        f
    }

    /// Input dimension.
    pub fn n_inputs(&self) -> usize {
        match &self.map {
            FeatureKind::Polynomial(p) => p.n,
            FeatureKind::Rff(r) => r.omega.ncols(),
        }
    }

    /// Feature count.
    pub fn len(&self) -> usize {
        match &self.map {
            FeatureKind::Polynomial(p) => p.factors.len(),
            FeatureKind::Rff(r) => r.d(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn raw(&self, z: &[f64]) -> DVector<f64> {
        match &self.map {
            FeatureKind::Polynomial(p) => p.eval(z),
            FeatureKind::Rff(r) => r.eval(z),
        }
    }

    pub fn eval(&self, z: &[f64]) -> DVector<f64> {
        debug_assert_eq!(z.len(), self.n_inputs());
        let mut v = self.raw(z);
        if self.centered {
            v -= &self.offset;
        }
        v
    }

    /// `len x n` Jacobian.
    pub fn jacobian(&self, z: &[f64]) -> DMatrix<f64> {
        match &self.map {
            FeatureKind::Polynomial(p) => p.jacobian(z),
            FeatureKind::Rff(r) => r.jacobian(z),
        }
    }

    /// Features of every row of `z` (`rows x n`) as a `rows x len` matrix.
    pub fn eval_rows(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(z.nrows(), self.len());
        let mut buf = vec![0.0; z.ncols()];
        for i in 0..z.nrows() {
            for j in 0..z.ncols() {
                buf[j] = z[(i, j)];
            }
            out.row_mut(i).copy_from(&self.eval(&buf).transpose());
        }
        out
    }
}

/// Agreement of `phi(x)' phi(y)` with the Gaussian kernel on random pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelCheck {
    pub pairs: usize,
    pub d: usize,
    pub length_scale: f64,
    pub mean_abs_error: f64,
    pub max_abs_error: f64,
    /// Mean error within `1.5 / sqrt(D)`, the Monte-Carlo scale of the estimate.
    pub pass: bool,
}

impl Rff {
    /// Compares the uncentered features with `exp(-|x - y|^2 / 2 l^2)` on
    /// `pairs` point pairs drawn from `N(0, l^2 I)`.
    pub fn kernel_check(&self, pairs: usize, seed: u64) -> KernelCheck {
        let n = self.omega.ncols();
        let l = self.length_scale;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    l * g
                })
                .collect()
        };
        let (mut sum, mut max) = (0.0, 0.0f64);
        for _ in 0..pairs {
            let (x, y) = (draw(), draw());
            let d2: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
            let err = (self.eval(&x).dot(&self.eval(&y)) - (-d2 / (2.0 * l * l)).exp()).abs();
            sum += err;
            max = max.max(err);
        }
        let mean = if pairs == 0 { 0.0 } else { sum / pairs as f64 };
        KernelCheck { pairs, d: self.d(), length_scale: l, mean_abs_error: mean, max_abs_error: max, pass: mean <= 1.5 / (self.d() as f64).sqrt() }
    }
}

/// Monomials of `z` with total degree in `[degree_lo, degree_hi]`.
pub fn poly_features(z: &[f64], degree_lo: usize, degree_hi: usize) -> Result<DVector<f64>> {
    Ok(Polynomial::new(z.len(), degree_lo, degree_hi)?.eval(z))
}

pub fn rff_features(z: &[f64], spec: &Rff) -> DVector<f64> {
    spec.eval(z)
}

pub fn feature_jacobian(spec: &FeatureMap, z: &[f64]) -> DMatrix<f64> {
    spec.jacobian(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_expanded_quadratic() {
        let v = poly_features(&[1.0, 2.0], 2, 2).unwrap();
        assert_eq!(v.as_slice(), &[1.0, 2.0, 4.0]);
        assert!(poly_features(&[0.0; 3], 2, 3).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn monomial_counts() {
        assert_eq!(Polynomial::new(5, 2, 2).unwrap().factors.len(), 15);
        assert_eq!(Polynomial::new(7, 2, 3).unwrap().factors.len(), 28 + 84);
        assert_eq!(monomial_count(5, 2, 2), Some(15));
        assert!(Polynomial::new(3, 1, 2).is_err());
        assert!(Polynomial::new(200, 2, 5).is_err());
    }

    #[test]
    fn graded_lex_order() {
        let p = Polynomial::new(2, 2, 3).unwrap();
        assert_eq!(p.exponents(), vec![vec![2, 0], vec![1, 1], vec![0, 2], vec![3, 0], vec![2, 1], vec![1, 2], vec![0, 3]]);
    }

    #[test]
    fn polynomial_jacobian_vanishes_at_origin() {
        let f = FeatureMap::polynomial(4, 2, 4).unwrap();
        assert!(f.jacobian(&[0.0; 4]).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rff_sampling_statistics() {
        let r = rff_sample(10, 1000, 1.0, 3).unwrap();
        let n = r.omega.len() as f64;
        let mean = r.omega.sum() / n;
        let std = (r.omega.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((0.95..=1.05).contains(&std), "std {std}");
        assert!(r.b.iter().all(|&b| (0.0..2.0 * PI).contains(&b)));
        assert_eq!(r, rff_sample(10, 1000, 1.0, 3).unwrap());
        let wide = rff_sample(10, 1000, 4.0, 3).unwrap();
        assert!((&wide.omega * 4.0 - &r.omega).amax() < 1e-12);
    }

    #[test]
    fn zero_frequency_feature_is_constant() {
        let r = Rff { length_scale: 1.0, seed: 0, omega: DMatrix::zeros(1, 3), b: DVector::zeros(1) };
        for z in [[0.0, 0.0, 0.0], [1.0, -2.0, 5.0]] {
            assert!((r.eval(&z)[0] - 2f64.sqrt()).abs() < 1e-15);
            assert!(r.jacobian(&z).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn centered_map_vanishes_at_origin() {
        let f = FeatureMap::rff(3, 64, 1.0, 2, true).unwrap();
        assert!(f.eval(&[0.0; 3]).amax() < 1e-15);
        let raw = FeatureMap::rff(3, 64, 1.0, 2, false).unwrap();
        let z = [0.3, -0.1, 0.7];
        assert!((f.jacobian(&z) - raw.jacobian(&z)).amax() == 0.0);
    }

    #[test]
    fn serialization_round_trip() {
        for f in [FeatureMap::polynomial(3, 2, 3).unwrap(), FeatureMap::rff(3, 16, 0.7, 9, true).unwrap()] {
            let text = serde_json::to_string(&f).unwrap();
            let back: FeatureMap = serde_json::from_str(&text).unwrap();
            assert_eq!(back, f);
        }
    }

    fn fd_check(f: &FeatureMap, z: &[f64]) -> f64 {
        let jac = f.jacobian(z);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for j in 0..z.len() {
            let mut zp = z.to_vec();
            let mut zm = z.to_vec();
            zp[j] += h;
            zm[j] -= h;
            let fd = (f.eval(&zp) - f.eval(&zm)) / (2.0 * h);
            for i in 0..f.len() {
                let scale = jac[(i, j)].abs().max(1.0);
                worst = worst.max((fd[i] - jac[(i, j)]).abs() / scale);
            }
        }
        worst
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn jacobians_match_finite_differences(
            z in proptest::collection::vec(-1.5f64..1.5, 4),
            seed in 0u64..1000,
            ell in 0.3f64..3.0,
        ) {
            let rff = FeatureMap::rff(4, 32, ell, seed, true).unwrap();
            prop_assert!(fd_check(&rff, &z) < 1e-6);
            let poly = FeatureMap::polynomial(4, 2, 3).unwrap();
            prop_assert!(fd_check(&poly, &z) < 1e-6);
        }
    }

    #[test]
    fn rff_kernel_check_shrinks_with_d() {
        let small = rff_sample(3, 50, 0.7, 4).unwrap().kernel_check(300, 1);
        let large = rff_sample(3, 5000, 0.7, 4).unwrap().kernel_check(300, 1);
        assert!(large.pass && large.mean_abs_error < 0.03);
        assert!(large.mean_abs_error < small.mean_abs_error);
    }
}
