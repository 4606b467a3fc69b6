//! The compound Poisson-gamma (CP-g) Tweedie distribution, `1 < ξ < 2`.
//!
//! With mean `μ`, dispersion `φ` and index `ξ` the density is
//! `a(y, φ) exp{(yθ - κ(θ)) / φ}` where `θ = μ^{1-ξ}/(1-ξ)` and
//! `κ(θ) = μ^{2-ξ}/(2-ξ)`, and `a(0, φ) = 1`. For `y > 0` the normalizer is
//! the series
//!
//! ```text
//! a(y, φ) = (1/y) Σ_{j≥1} z^j / (j! Γ(-jα)),   z = y^{-α}(ξ-1)^α / (φ^{1-α}(2-ξ))
//! ```
//!
//! with `α = (2-ξ)/(1-ξ) < 0`. It is summed in log space outward from the
//! dominant index until terms fall [`SERIES_LOG_DROP`] nats below the peak.

use core::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};

use crate::error::{check_len, domain, Result};
use crate::model::ObservationSet;
use crate::special::ln_gamma;

/// Terms more than this many nats below the largest one are dropped.
pub const SERIES_LOG_DROP: f64 = 37.0;

/// The Tweedie index `ξ`, restricted to the CP-g range `(1, 2)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct TweedieIndex(f64);

impl TweedieIndex {
    pub fn new(xi: f64) -> Result<Self> {
        if xi > 1.0 && xi < 2.0 {
            Ok(TweedieIndex(xi))
        } else {
            Err(domain(alloc::format!(
                "Tweedie index must lie in (1, 2), got {xi}"
            )))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    /// Series exponent `α = (2-ξ)/(1-ξ)`.
    #[inline]
    pub fn alpha(self) -> f64 {
        (2.0 - self.0) / (1.0 - self.0)
    }
}

/// Mean, dispersion and index of a single CP-g law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TweedieParams {
    mu: f64,
    phi: f64,
    xi: TweedieIndex,
}

impl TweedieParams {
    pub fn new(mu: f64, phi: f64, xi: TweedieIndex) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(domain(alloc::format!("mean must be positive, got {mu}")));
        }
        if !(phi > 0.0 && phi.is_finite()) {
            return Err(domain(alloc::format!(
                "dispersion must be positive, got {phi}"
            )));
        }
        Ok(TweedieParams { mu, phi, xi })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn xi(&self) -> TweedieIndex {
        self.xi
    }

    /// `φ μ^ξ`
    pub fn variance(&self) -> f64 {
        self.phi * libm::pow(self.mu, self.xi.0)
    }

    /// Cumulant `κ(θ) = μ^{2-ξ}/(2-ξ)`.
    pub fn cumulant(&self) -> f64 {
        cumulant(self.mu, self.xi.0)
    }

    /// Expected number of gamma jumps, `λ = κ/φ`.
    pub fn poisson_rate(&self) -> f64 {
        self.cumulant() / self.phi
    }

    /// Probability of an exact zero, `exp(-κ/φ)`.
    pub fn zero_probability(&self) -> f64 {
        libm::exp(-self.poisson_rate())
    }
}

/// How the density is evaluated for `y > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DensityMethod {
    /// Exact series for `a(y, φ)`.
    Series,
    /// `(2πφy^ξ)^{-1/2} exp{-d(y|μ)/(2φ)}`.
    Saddlepoint,
}

#[inline]
pub(crate) fn cumulant(mu: f64, xi: f64) -> f64 {
    libm::pow(mu, 2.0 - xi) / (2.0 - xi)
}

/// Unit deviance `d(y|μ,ξ)`; `y = 0` uses `0^{2-ξ} = 0`.
pub fn deviance(y: f64, mu: f64, xi: TweedieIndex) -> Result<f64> {
    if !(y >= 0.0) || !y.is_finite() {
        return Err(domain(alloc::format!("response must be >= 0, got {y}")));
    }
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(domain(alloc::format!("mean must be positive, got {mu}")));
    }
    Ok(unit_deviance(y, mu, xi.0))
}

/// Unchecked unit deviance for validated inputs.
#[inline]
pub(crate) fn unit_deviance(y: f64, mu: f64, xi: f64) -> f64 {
    if y == 0.0 {
        return 2.0 * cumulant(mu, xi);
    }
    if y == mu {
        return 0.0;
    }
    let y2 = libm::pow(y, 2.0 - xi);
    let mu1 = libm::pow(mu, 1.0 - xi);
    let mu2 = mu1 * mu;
    let d = 2.0 * ((y2 - y * mu1) / (1.0 - xi) - (y2 - mu2) / (2.0 - xi));
    d.max(0.0)
}

/// Log of the series normalizer together with the weighted mean jump count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesSummary {
    /// `log a(y, φ)`.
    pub log_a: f64,
    /// `Σ j W_j / Σ W_j`; `d log a / d log φ = -mean_jumps / (ξ - 1)`.
    pub mean_jumps: f64,
    /// Number of series terms summed.
    pub terms: usize,
}

/// `log a(y, φ)` for `y > 0` (see module docs).
pub fn log_normalizer(y: f64, phi: f64, xi: TweedieIndex) -> Result<f64> {
    if !(y > 0.0) || !y.is_finite() {
        return Err(domain(alloc::format!(
            "series normalizer needs y > 0, got {y}"
        )));
    }
    if !(phi > 0.0) || !phi.is_finite() {
        return Err(domain(alloc::format!(
            "dispersion must be positive, got {phi}"
        )));
    }
    Ok(series(y, phi, xi.0).log_a)
}

/// Evaluates the series for validated `y > 0`, `φ > 0`.
pub(crate) fn series(y: f64, phi: f64, xi: f64) -> SeriesSummary {
    let alpha = (2.0 - xi) / (1.0 - xi);
    let log_z = -alpha * libm::log(y) + alpha * libm::log(xi - 1.0)
        - (1.0 - alpha) * libm::log(phi)
        - libm::log(2.0 - xi);
    let term = |j: f64| j * log_z - ln_gamma(j + 1.0) - ln_gamma(-j * alpha);

    let guess = libm::pow(y, 2.0 - xi) / (phi * (2.0 - xi));
    let mut jmax = if guess.is_finite() {
        libm::round(guess).max(1.0)
    } else {
        1.0
    };
    let mut tmax = term(jmax);
    // The rounded stationary point can be one step off the true peak.
    loop {
        let up = term(jmax + 1.0);
        if up > tmax {
            jmax += 1.0;
            tmax = up;
            continue;
        }
        if jmax > 1.0 {
            let down = term(jmax - 1.0);
            if down > tmax {
                jmax -= 1.0;
                tmax = down;
                continue;
            }
        }
        break;
    }

    let cutoff = tmax - SERIES_LOG_DROP;
    let mut sum = 1.0;
    let mut sum_j = jmax;
    let mut terms = 1;
    let mut j = jmax + 1.0;
    loop {
        let t = term(j);
        if t < cutoff || !t.is_finite() {
            break;
        }
        let e = libm::exp(t - tmax);
        sum += e;
        sum_j += j * e;
        terms += 1;
        j += 1.0;
    }
    j = jmax - 1.0;
    while j >= 1.0 {
        let t = term(j);
        if t < cutoff || !t.is_finite() {
            break;
        }
        let e = libm::exp(t - tmax);
        sum += e;
        sum_j += j * e;
        terms += 1;
        j -= 1.0;
    }
    SeriesSummary {
        log_a: tmax + libm::log(sum) - libm::log(y),
        mean_jumps: sum_j / sum,
        terms,
    }
}

/// Log-density (or log point mass at zero).
pub fn log_density(y: f64, params: &TweedieParams, method: DensityMethod) -> Result<f64> {
    if !(y >= 0.0) || !y.is_finite() {
        return Err(domain(alloc::format!("response must be >= 0, got {y}")));
    }
    Ok(log_density_unchecked(
        y,
        params.mu,
        params.phi,
        params.xi.0,
        method,
    ))
}

#[inline]
pub(crate) fn log_density_unchecked(y: f64, mu: f64, phi: f64, xi: f64, method: DensityMethod) -> f64 {
    if y == 0.0 {
        return -cumulant(mu, xi) / phi;
    }
    match method {
        DensityMethod::Series => {
            let mu1 = libm::pow(mu, 1.0 - xi);
            let exponent = (y * mu1 / (1.0 - xi) - mu1 * mu / (2.0 - xi)) / phi;
            series(y, phi, xi).log_a + exponent
        }
        DensityMethod::Saddlepoint => {
            -0.5 * libm::log(2.0 * PI * phi * libm::pow(y, xi))
                - unit_deviance(y, mu, xi) / (2.0 * phi)
        }
    }
}

/// `Σ_k log f(y_k | μ_k, φ_k, ξ)` in index order.
pub fn log_likelihood_values(
    y: &[f64],
    mu: &[f64],
    phi: &[f64],
    xi: TweedieIndex,
    method: DensityMethod,
) -> Result<f64> {
    check_len("mean vector", y.len(), mu.len())?;
    check_len("dispersion vector", y.len(), phi.len())?;
    let mut total = 0.0;
    for k in 0..y.len() {
        let (yk, mk, pk) = (y[k], mu[k], phi[k]);
        if !(yk >= 0.0) || !(mk > 0.0) || !(pk > 0.0) {
            return Err(domain(alloc::format!(
                "invalid observation {k}: y={yk}, mu={mk}, phi={pk}"
            )));
        }
        total += log_density_unchecked(yk, mk, pk, xi.0, method);
    }
    Ok(total)
}

/// Log-likelihood of an observation set at the given means and dispersions.
pub fn log_likelihood(
    obs: &ObservationSet,
    mu: &[f64],
    phi: &[f64],
    xi: TweedieIndex,
    method: DensityMethod,
) -> Result<f64> {
    log_likelihood_values(obs.y(), mu, phi, xi, method)
}

/// Draws from the CP-g law as a Poisson number of gamma jumps.
///
/// `N ~ Poisson(μ^{2-ξ}/(φ(2-ξ)))`; given `N = n > 0` the sum of jumps is
/// `Gamma(shape = n(2-ξ)/(ξ-1), scale = φ(ξ-1)μ^{ξ-1})`.
pub fn sample_cpg<R: Rng + ?Sized>(params: &TweedieParams, rng: &mut R) -> f64 {
    let xi = params.xi.0;
    let lambda = params.poisson_rate();
    let count: f64 = match Poisson::new(lambda) {
        Ok(p) => p.sample(rng),
        // Rates beyond the sampler's range only occur for absurd means.
        Err(_) => libm::round(lambda),
    };
    if count == 0.0 {
        return 0.0;
    }
    let shape = count * (2.0 - xi) / (xi - 1.0);
    let scale = params.phi * (xi - 1.0) * libm::pow(params.mu, xi - 1.0);
    Gamma::new(shape, scale)
        .expect("shape and scale are positive for valid params")
        .sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn xi(v: f64) -> TweedieIndex {
        TweedieIndex::new(v).unwrap()
    }

    fn params(mu: f64, phi: f64, x: f64) -> TweedieParams {
        TweedieParams::new(mu, phi, xi(x)).unwrap()
    }

    #[test]
    fn index_range() {
        assert!(TweedieIndex::new(1.0).is_err());
        assert!(TweedieIndex::new(2.0).is_err());
        assert!(TweedieIndex::new(f64::NAN).is_err());
        assert_eq!(xi(1.5).alpha(), -1.0);
    }

    #[test]
    fn params_validation() {
        assert!(TweedieParams::new(0.0, 1.0, xi(1.5)).is_err());
        assert!(TweedieParams::new(1.0, -1.0, xi(1.5)).is_err());
        let p = params(3.0, 0.5, 1.7);
        assert!((p.variance() - 0.5 * libm::pow(3.0, 1.7)).abs() < 1e-12);
    }

    #[test]
    fn deviance_examples() {
        assert_eq!(deviance(2.0, 2.0, xi(1.5)).unwrap(), 0.0);
        assert_eq!(deviance(0.0, 1.0, xi(1.5)).unwrap(), 4.0);
        // mpmath, 200-bit.
        let d = deviance(2.0, 1.0, xi(1.5)).unwrap();
        assert!((d - 0.686_291_501_015_239_6).abs() < 1e-14);
        assert!(deviance(-1.0, 1.0, xi(1.5)).is_err());
        assert!(deviance(1.0, 0.0, xi(1.5)).is_err());
    }

    #[test]
    fn zero_branch_both_methods() {
        let p = params(1.0, 1.0, 1.5);
        assert_eq!(log_density(0.0, &p, DensityMethod::Series).unwrap(), -2.0);
        assert_eq!(log_density(0.0, &p, DensityMethod::Saddlepoint).unwrap(), -2.0);
        assert!(log_density(-0.1, &p, DensityMethod::Series).is_err());
    }

    #[test]
    fn series_matches_high_precision_oracle() {
        // Brute-force 200-bit summation to j = 10^4 (tests/oracles/oracle_values.py).
        let cases = [
            ((2.0, 1.0, 1.0, 1.5), -1.855_330_788_967_007_8),
            ((0.3, 2.0, 0.7, 1.2), -1.911_783_575_871_092_2),
            ((15.0, 4.0, 2.0, 1.8), -4.835_211_242_486_163),
            ((120.0, 100.0, 0.5, 1.5), -4.531_678_293_140_460_5),
            ((1e-3, 1.0, 1.0, 1.5), -0.613_706_305_102_686_9),
        ];
        for ((y, mu, phi, x), want) in cases {
            let got = log_density(y, &params(mu, phi, x), DensityMethod::Series).unwrap();
            assert!(
                ((got - want) / want).abs() < 1e-10,
                "y={y} mu={mu} phi={phi} xi={x}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn deviance_identity_at_zero() {
        for &(mu, phi, x) in &[(0.5, 0.5, 1.2), (1.0, 2.0, 1.5), (5.0, 1.0, 1.8)] {
            let ld = log_density(0.0, &params(mu, phi, x), DensityMethod::Series).unwrap();
            let d = deviance(0.0, mu, xi(x)).unwrap();
            assert_eq!(ld, -d / (2.0 * phi));
        }
    }

    #[test]
    fn series_gradient_matches_finite_difference() {
        for &(y, phi, x) in &[(2.0, 1.0, 1.5), (0.4, 0.3, 1.3), (30.0, 2.0, 1.7)] {
            let s = series(y, phi, x);
            let h = 1e-5;
            let up = series(y, phi * libm::exp(h), x).log_a;
            let dn = series(y, phi * libm::exp(-h), x).log_a;
            let fd = (up - dn) / (2.0 * h);
            let analytic = -s.mean_jumps / (x - 1.0);
            assert!((fd - analytic).abs() < 1e-6 * (1.0 + analytic.abs()));
        }
    }

    #[test]
    fn consistency_of_forms() {
        let p = params(2.5, 0.8, 1.4);
        let y = 1.7;
        let series_ld = log_density(y, &p, DensityMethod::Series).unwrap();
        let mu = p.mu();
        let by_parts = log_normalizer(y, p.phi(), p.xi()).unwrap()
            + (y * libm::pow(mu, -0.4) / (-0.4) - libm::pow(mu, 0.6) / 0.6) / p.phi();
        assert!((series_ld - by_parts).abs() < 1e-12);
    }

    #[test]
    fn log_likelihood_sums_and_checks_lengths() {
        let y = [0.0, 0.0, 0.0];
        let ones = [1.0; 3];
        let ll = log_likelihood_values(&y, &ones, &ones, xi(1.5), DensityMethod::Series).unwrap();
        assert_eq!(ll, -6.0);
        assert!(log_likelihood_values(&y, &ones[..2], &ones, xi(1.5), DensityMethod::Series).is_err());
    }

    #[test]
    fn sampler_is_deterministic() {
        let p = params(1.0, 1.0, 1.5);
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(sample_cpg(&p, &mut a), sample_cpg(&p, &mut b));
        }
    }

    #[test]
    fn sampler_zero_frequency() {
        let p = params(1.0, 1.0, 1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 100_000;
        let zeros = (0..n).filter(|_| sample_cpg(&p, &mut rng) == 0.0).count();
        let freq = zeros as f64 / n as f64;
        assert!((freq - libm::exp(-2.0)).abs() < 0.01, "{freq}");
    }
}
