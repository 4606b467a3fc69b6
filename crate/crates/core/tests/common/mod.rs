#![allow(dead_code)]

use rand::Rng;
use rand_distr::StandardNormal;
use tweedie_dglm::diagnostics::ess_acf;
use tweedie_dglm::linalg::{Cholesky, Matrix};
use tweedie_dglm::model::ObservationSet;
use tweedie_dglm::spatial::SpatialDomain;
use tweedie_dglm::tweedie::{log_density, sample_cpg};
use tweedie_dglm::{DensityMethod, TweedieIndex, TweedieParams};

pub const MU_GRID: [f64; 3] = [0.5, 1.0, 5.0];
pub const PHI_GRID: [f64; 3] = [0.5, 1.0, 2.0];
pub const XI_GRID: [f64; 3] = [1.2, 1.5, 1.8];

pub fn grid() -> impl Iterator<Item = TweedieParams> {
    MU_GRID.into_iter().flat_map(|mu| {
        PHI_GRID.into_iter().flat_map(move |phi| {
            XI_GRID
                .into_iter()
                .map(move |xi| TweedieParams::new(mu, phi, TweedieIndex::new(xi).unwrap()).unwrap())
        })
    })
}

/// Zero mass plus the integral of the positive part over `(0, μ + 40 sd)`.
/// The density behaves like `y^{-1-α}` near zero, which is singular for
/// `ξ > 1.5`; the first panel is integrated in `u = y^{1/4}` to remove it.
pub fn total_mass(p: &TweedieParams) -> f64 {
    let upper = p.mu() + 40.0 * p.variance().sqrt();
    let f = |y: f64| {
        if y <= 0.0 {
            0.0
        } else {
            log_density(y, p, DensityMethod::Series).unwrap().exp()
        }
    };
    let zero = log_density(0.0, p, DensityMethod::Series).unwrap().exp();
    let mid = p.mu().min(upper / 2.0);
    let near = |u: f64| 4.0 * u * u * u * f(u.powi(4));
    let a = quadrature::double_exponential::integrate(near, 0.0, mid.powf(0.25), 1e-13).integral;
    let b = quadrature::double_exponential::integrate(f, mid, upper, 1e-13).integral;
    zero + a + b
}

/// Asymptotic Kolmogorov-Smirnov p-value of the one-sample statistic.
pub fn ks_pvalue(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let t = d * (n.sqrt() + 0.12 + 0.11 / n.sqrt());
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let sign = if k as i64 % 2 == 1 { 1.0 } else { -1.0 };
        p += 2.0 * sign * (-2.0 * k * k * t * t).exp();
    }
    p.clamp(0.0, 1.0)
}

/// Monte Carlo standard error of the mean, using the chain's ESS.
pub fn mc_se(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    let ess = ess_acf(xs, 200).unwrap().ess;
    (v / ess).sqrt()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Central finite difference of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|j| {
            let h = 1e-5 * x[j].abs().max(1.0);
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[j] += h;
            b[j] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a − b| / max(|b|, 1)` over components.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// A random spatial DGLM instance with true coefficients and effects.
pub struct Instance {
    pub obs: ObservationSet,
    pub domain: SpatialDomain,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub w: Vec<f64>,
    pub xi: f64,
    pub phi_s: f64,
}

pub fn random_instance<R: Rng>(n: usize, p: usize, q: usize, l: usize, rng: &mut R) -> Instance {
    let cov = |cols: usize, rng: &mut R| {
        Matrix::from_fn(n, cols, |_, j| if j == 0 { 1.0 } else { rng.sample(StandardNormal) })
    };
    let x = cov(p, rng);
    let z = cov(q, rng);
    let beta: Vec<f64> = (0..p).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
    let gamma: Vec<f64> = (0..q).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
    let w: Vec<f64> = (0..l).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
    let xi = rng.random_range(1.2..1.8);
    let phi_s = rng.random_range(1.0..5.0);
    let coords: Vec<[f64; 2]> = (0..l).map(|_| [rng.random(), rng.random()]).collect();
    let loc: Vec<usize> = (0..n).map(|k| if k < l { k } else { rng.random_range(0..l) }).collect();
    let exposure: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    let idx = TweedieIndex::new(xi).unwrap();
    let y = (0..n)
        .map(|k| {
            let em: f64 = x.row(k).iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() + w[loc[k]];
            let ep: f64 = z.row(k).iter().zip(&gamma).map(|(a, b)| a * b).sum();
            sample_cpg(&TweedieParams::new(em.exp(), ep.exp(), idx).unwrap(), rng)
        })
        .collect();
    Instance {
        obs: ObservationSet::new(y, exposure, loc, l, x, z).unwrap(),
        domain: SpatialDomain::new(coords).unwrap(),
        beta,
        gamma,
        w,
        xi,
        phi_s,
    }
}

pub fn correlation_factor(domain: &SpatialDomain, phi_s: f64) -> Cholesky {
    Cholesky::new(&domain.correlation(phi_s, 0.5), 0.0).unwrap()
}
