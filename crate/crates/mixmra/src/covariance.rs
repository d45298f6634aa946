//! Stationary Matern covariance family.
//!
//! The parameterization is
//! `C(d) = sigma2 * 2^(1-nu) / Gamma(nu) * (d/phi)^nu * K_nu(d/phi)`
//! with `C(0) = sigma2`, so a larger range `phi` means a more slowly
//! decaying correlation. Distances are Euclidean in the coordinate plane.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::bessel::bessel_k_unchecked;
use crate::error::{Error, Result};
use crate::geometry::Location;

/// Matern covariance parameters `theta = (sigma2, phi, nu)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceParams {
    /// Marginal variance, in data-variance units.
    pub sigma2: f64,
    /// Range, in distance units.
    pub phi: f64,
    /// Smoothness, dimensionless, in `(0, 2]`.
    pub nu: f64,
}

impl CovarianceParams {
    pub fn new(sigma2: f64, phi: f64, nu: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::Config(format!("sigma2 must be > 0, got {sigma2}")));
        }
        if !(phi > 0.0 && phi.is_finite()) {
            return Err(Error::Config(format!("phi must be > 0, got {phi}")));
        }
        if !(nu > 0.0 && nu <= 2.0) {
            return Err(Error::Config(format!("nu must be in (0, 2], got {nu}")));
        }
        Ok(CovarianceParams { sigma2, phi, nu })
    }
}

/// Nugget (measurement-error) variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuggetParam {
    pub tau2: f64,
}

impl NuggetParam {
    pub fn new(tau2: f64) -> Result<Self> {
        if !(tau2 > 0.0 && tau2.is_finite()) {
            return Err(Error::Config(format!("tau2 must be > 0, got {tau2}")));
        }
        Ok(NuggetParam { tau2 })
    }
}

/// Matern kernel with the order-dependent constants precomputed, for
/// repeated evaluation at many distances.
#[derive(Debug, Clone, Copy)]
pub struct MaternKernel {
    params: CovarianceParams,
    norm: f64,
    knu: crate::bessel::KnuEval,
}

impl MaternKernel {
    pub fn new(p: &CovarianceParams) -> Self {
        MaternKernel {
            params: *p,
            norm: p.sigma2 * (2.0f64).powf(1.0 - p.nu) / gamma(p.nu),
            knu: crate::bessel::KnuEval::new(p.nu),
        }
    }

    /// Covariance at distance `d >= 0`. The scaled argument below 1e-130 is
    /// treated as zero lag to avoid overflow in `K_nu`.
    #[inline]
    pub fn eval(&self, d: f64) -> f64 {
        debug_assert!(d.is_finite() && d >= 0.0);
        let x = d / self.params.phi;
        if x < 1e-130 {
            return self.params.sigma2;
        }
        self.norm * x.powf(self.params.nu) * self.knu.eval(x)
    }
}

/// Matern covariance at distance `d >= 0`.
///
/// Panics on non-finite or negative `d`. Use [`MaternKernel`] when
/// evaluating at many distances.
pub fn matern(d: f64, p: &CovarianceParams) -> f64 {
    assert!(d.is_finite() && d >= 0.0, "matern requires finite d >= 0, got {d}");
    MaternKernel::new(p).eval(d)
}

fn fill_column(col: &mut [f64], a: &[Location], b_j: &Location, kernel: &MaternKernel) {
    for (entry, ai) in col.iter_mut().zip(a) {
        *entry = kernel.eval(ai.dist(b_j));
    }
}

/// Covariance matrix `C(A, B)` with entry `(i, k) = matern(dist(A_i, B_k))`.
///
/// When `A` and `B` are the same slice the result is symmetric to exact
/// equality (the upper triangle is mirrored). The parallel build fills whole
/// columns, so it is bit-identical to the sequential order.
pub fn cov_matrix(a: &[Location], b: &[Location], p: &CovarianceParams) -> DMatrix<f64> {
    if std::ptr::eq(a, b) {
        return cov_matrix_sym(a, p);
    }
    let (n, m) = (a.len(), b.len());
    let kernel = MaternKernel::new(p);
    let mut out = DMatrix::<f64>::zeros(n, m);
    let cols = out.as_mut_slice(); // column-major storage
    #[cfg(feature = "parallel")]
    {
        cols.par_chunks_mut(n.max(1))
            .zip(b.par_iter())
            .for_each(|(col, bj)| fill_column(col, a, bj, &kernel));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (col, bj) in cols.chunks_mut(n.max(1)).zip(b.iter()) {
            fill_column(col, a, bj, &kernel);
        }
    }
    out
}

/// Symmetric covariance matrix `C(A, A)`.
pub fn cov_matrix_sym(a: &[Location], p: &CovarianceParams) -> DMatrix<f64> {
    let n = a.len();
    let kernel = MaternKernel::new(p);
    let mut out = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        out[(j, j)] = p.sigma2;
        for i in (j + 1)..n {
            let v = kernel.eval(a[i].dist(&a[j]));
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn params(sigma2: f64, phi: f64, nu: f64) -> CovarianceParams {
        CovarianceParams::new(sigma2, phi, nu).unwrap()
    }

    #[test]
    fn zero_lag_is_sigma2() {
        for &nu in &[0.3, 0.5, 1.0, 1.7] {
            let p = params(2.5, 0.4, nu);
            assert_eq!(matern(0.0, &p), 2.5);
        }
    }

    #[test]
    fn matern_half_is_exponential() {
        let p = params(1.7, 0.3, 0.5);
        for &d in &[1e-8, 0.01, 0.1, 0.5, 1.0, 3.0] {
            let expect = 1.7 * f64::exp(-d / 0.3);
            assert!((matern(d, &p) / expect - 1.0).abs() < 1e-12, "d={d}");
        }
    }

    #[test]
    fn matern_one_at_range() {
        // nu = 1, d = phi, sigma2 = 1: value is (d/phi) K_1(d/phi) = K_1(1).
        let p = params(1.0, 0.25, 1.0);
        let got = matern(0.25, &p);
        assert!((got - 0.601_907_230_197_234_6).abs() < 1e-10, "got {got}");
    }

    #[test]
    fn monotone_nonincreasing_and_bounded() {
        for &nu in &[0.2, 0.5, 1.0, 1.5, 2.0] {
            let p = params(1.3, 0.2, nu);
            let mut last = f64::INFINITY;
            let mut d = 0.0;
            while d < 3.0 {
                let v = matern(d, &p);
                assert!(v <= last + 1e-14, "nu={nu} d={d}");
                assert!(v > 0.0 && v / p.sigma2 <= 1.0 + 1e-14);
                last = v;
                d += 0.01;
            }
        }
    }

    #[test]
    fn one_by_one_and_two_point_matrix() {
        let p = params(2.0, 0.5, 0.5);
        let a = [Location::new(0.1, 0.2)];
        let m = cov_matrix(&a, &a, &p);
        assert_eq!(m.nrows(), 1);
        assert_eq!(m[(0, 0)], 2.0);

        let b = [Location::new(0.0, 0.0), Location::new(0.3, 0.4)];
        let m = cov_matrix(&b, &b, &p);
        let expect = 2.0 * (-0.5 / 0.5f64).exp(); // distance 0.5
        assert!((m[(0, 1)] - expect).abs() < 1e-12);
        assert_eq!(m[(0, 1)], m[(1, 0)]);
    }

    #[test]
    fn random_matrix_is_psd() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let pts: Vec<Location> = (0..10)
            .map(|_| Location::new(rng.random(), rng.random()))
            .collect();
        let p = params(1.5, 0.3, 1.2);
        let m = cov_matrix(&pts, &pts, &p);
        let eig = m.clone().symmetric_eigenvalues();
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min >= -1e-10 * p.sigma2, "min eigenvalue {min}");
        // symmetric to exact equality
        for i in 0..10 {
            for j in 0..10 {
                assert_eq!(m[(i, j)], m[(j, i)]);
            }
        }
    }

    #[test]
    fn parallel_matches_sequential_fill() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let a: Vec<Location> = (0..23)
            .map(|_| Location::new(rng.random(), rng.random()))
            .collect();
        let b: Vec<Location> = (0..17)
            .map(|_| Location::new(rng.random(), rng.random()))
            .collect();
        let p = params(1.1, 0.15, 0.8);
        let m = cov_matrix(&a, &b, &p);
        for j in 0..b.len() {
            for i in 0..a.len() {
                let expect = matern(a[i].dist(&b[j]), &p);
                assert_eq!(m[(i, j)], expect);
            }
        }
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(CovarianceParams::new(0.0, 1.0, 1.0).is_err());
        assert!(CovarianceParams::new(1.0, -1.0, 1.0).is_err());
        assert!(CovarianceParams::new(1.0, 1.0, 2.5).is_err());
        assert!(NuggetParam::new(0.0).is_err());
    }
}
