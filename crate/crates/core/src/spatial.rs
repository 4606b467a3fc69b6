//! Site geometry and the Matérn covariance.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{domain, Error, Result};
use crate::linalg::{Cholesky, Matrix};
use crate::special::{bessel_k, ln_gamma};

/// Factorized covariance (lower factor, log-determinant, jitter used).
pub type CholState = Cholesky;

/// Planar site coordinates and their pairwise Euclidean distances.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialDomain {
    coords: Vec<[f64; 2]>,
    dist: Matrix,
}

impl SpatialDomain {
    pub fn new(coords: Vec<[f64; 2]>) -> Result<Self> {
        let dist = pairwise_distances(&coords)?;
        Ok(SpatialDomain { coords, dist })
    }

    pub fn n_sites(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn distances(&self) -> &Matrix {
        &self.dist
    }

    /// Matérn correlation matrix `R(φ_s)` over the sites.
    pub fn correlation(&self, phi_s: f64, nu: f64) -> Matrix {
        matern_correlation(&self.dist, phi_s, nu)
    }
}

/// `L × L` Euclidean distance matrix.
pub fn pairwise_distances(coords: &[[f64; 2]]) -> Result<Matrix> {
    if coords.is_empty() {
        return Err(domain("at least one site is required"));
    }
    for (i, c) in coords.iter().enumerate() {
        if !c[0].is_finite() || !c[1].is_finite() {
            return Err(domain(format!("site {i} has non-finite coordinates")));
        }
    }
    let n = coords.len();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let dx = coords[i][0] - coords[j][0];
            let dy = coords[i][1] - coords[j][1];
            let v = libm::hypot(dx, dy);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    Ok(d)
}

/// Normalized Matérn correlation `2^{1-ν}/Γ(ν) (φ_s d)^ν K_ν(φ_s d)`, equal
/// to one at `d = 0`.
pub fn matern(d: f64, phi_s: f64, nu: f64) -> f64 {
    let x = phi_s * d;
    if x == 0.0 {
        return 1.0;
    }
    if nu == 0.5 {
        return libm::exp(-x);
    }
    if nu == 1.5 {
        return (1.0 + x) * libm::exp(-x);
    }
    if nu == 2.5 {
        return (1.0 + x + x * x / 3.0) * libm::exp(-x);
    }
    let log_c = (1.0 - nu) * core::f64::consts::LN_2 - ln_gamma(nu);
    libm::exp(log_c + nu * libm::log(x)) * bessel_k(nu, x)
}

/// Applies [`matern`] elementwise to a distance matrix.
pub fn matern_correlation(dist: &Matrix, phi_s: f64, nu: f64) -> Matrix {
    let n = dist.rows();
    let mut r = Matrix::zeros(n, n);
    for i in 0..n {
        r[(i, i)] = 1.0;
        for j in 0..i {
            let v = matern(dist[(i, j)], phi_s, nu);
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    r
}

/// Matérn process parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaternKernel {
    pub sigma2: f64,
    pub phi_s: f64,
    pub nu: f64,
}

impl MaternKernel {
    pub fn new(sigma2: f64, phi_s: f64, nu: f64) -> Result<Self> {
        if !(sigma2 > 0.0) || !(phi_s > 0.0) || !(nu > 0.0) {
            return Err(domain(format!(
                "Matérn parameters must be positive (sigma2={sigma2}, phi_s={phi_s}, nu={nu})"
            )));
        }
        Ok(MaternKernel { sigma2, phi_s, nu })
    }

    /// `σ² R(φ_s)`.
    pub fn covariance(&self, domain: &SpatialDomain) -> Matrix {
        let mut c = domain.correlation(self.phi_s, self.nu);
        let n = c.rows();
        for i in 0..n {
            for j in 0..n {
                c[(i, j)] *= self.sigma2;
            }
        }
        c
    }
}

/// Cholesky factorization with the jitter ladder from `base_jitter`.
pub fn chol_factor(cov: &Matrix, base_jitter: f64) -> Result<CholState> {
    if cov.asymmetry() > 1e-10 * (1.0 + cov.mean_diagonal().abs()) {
        return Err(Error::Domain("covariance matrix is not symmetric".into()));
    }
    Cholesky::new(cov, base_jitter)
}
