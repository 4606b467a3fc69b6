//! Synthetic data for recovery experiments and fit metrics.
//!
//! Both design matrices share one block of standardized Gaussian covariates
//! (`v1..vm`) behind an intercept column. Active covariates get coefficients
//! drawn from `N(μ, σ)`; inactive ones are zero. The mean intercept is chosen
//! per zero-proportion setting so that the realized fraction of zeros lands
//! near its target.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::diagnostics::{hpd_sorted, median_state};
use crate::error::{check_len, domain, Error, Result};
use crate::linalg::{Cholesky, Matrix};
use crate::model::ObservationSet;
use crate::samplers::{hierarchical_center, ChainOutput};
use crate::selection::ModelSelection;
use crate::spatial::{MaternKernel, SpatialDomain};
use crate::tweedie::{sample_cpg, TweedieIndex, TweedieParams};

/// Target proportion of zeros; each level fixes one row of coefficient settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ZeroSetting {
    P15,
    P30,
    P60,
    P80,
    P95,
}

/// Coefficient settings of one zero-proportion level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientRow {
    pub mu_beta: f64,
    pub sd_beta: f64,
    pub gamma0: f64,
    pub mu_gamma: f64,
    pub sd_gamma: f64,
}

impl ZeroSetting {
    pub const ALL: [ZeroSetting; 5] = [
        ZeroSetting::P15,
        ZeroSetting::P30,
        ZeroSetting::P60,
        ZeroSetting::P80,
        ZeroSetting::P95,
    ];

    pub fn fraction(self) -> f64 {
        match self {
            ZeroSetting::P15 => 0.15,
            ZeroSetting::P30 => 0.30,
            ZeroSetting::P60 => 0.60,
            ZeroSetting::P80 => 0.80,
            ZeroSetting::P95 => 0.95,
        }
    }

    pub fn from_percent(pct: u32) -> Result<Self> {
        match pct {
            15 => Ok(ZeroSetting::P15),
            30 => Ok(ZeroSetting::P30),
            60 => Ok(ZeroSetting::P60),
            80 => Ok(ZeroSetting::P80),
            95 => Ok(ZeroSetting::P95),
            _ => Err(Error::Config(format!(
                "zero setting must be one of 15, 30, 60, 80, 95; got {pct}"
            ))),
        }
    }

    pub fn row(self) -> CoefficientRow {
        let (mu_beta, gamma0) = match self {
            ZeroSetting::P15 => (0.5, -1.5),
            ZeroSetting::P30 => (0.5, 0.7),
            ZeroSetting::P60 => (0.5, 2.5),
            ZeroSetting::P80 => (1.0, 4.5),
            ZeroSetting::P95 => (1.0, 7.0),
        };
        CoefficientRow {
            mu_beta,
            sd_beta: 0.1,
            gamma0,
            mu_gamma: 0.5,
            sd_gamma: 0.1,
        }
    }

    /// Mean intercept giving roughly the target zero fraction for
    /// `pattern` (calibrated by simulation with four active covariates).
    pub fn default_beta0(self, pattern: Option<SpatialPattern>) -> f64 {
        let deterministic = matches!(pattern, Some(SpatialPattern::Deterministic));
        match (self, deterministic) {
            (ZeroSetting::P15, false) => -2.9,
            (ZeroSetting::P30, false) => 0.5,
            (ZeroSetting::P60, false) => 2.2,
            (ZeroSetting::P80, false) => 4.6,
            (ZeroSetting::P95, false) => 6.7,
            (ZeroSetting::P15, true) => -0.3,
            (ZeroSetting::P30, true) => 1.0,
            (ZeroSetting::P60, true) => 0.2,
            (ZeroSetting::P80, true) => 0.7,
            (ZeroSetting::P95, true) => 1.6,
        }
    }
}

/// True spatial effect.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpatialPattern {
    /// One realization of a zero-mean Matérn process.
    GpDraw { sigma2: f64, phi_s: f64, nu: f64 },
    /// `w_i ~ N(5(sin(3π s₁) + cos(3π s₂)), 1)`.
    Deterministic,
}

impl SpatialPattern {
    /// Exponential-kernel draw with `σ² = 1.5`, `φ_s = 3`.
    pub fn gp_default() -> Self {
        SpatialPattern::GpDraw {
            sigma2: 1.5,
            phi_s: 3.0,
            nu: 0.5,
        }
    }
}

/// Deterministic mean surface of [`SpatialPattern::Deterministic`].
pub fn deterministic_surface(s: [f64; 2]) -> f64 {
    5.0 * (libm::sin(3.0 * PI * s[0]) + libm::cos(3.0 * PI * s[1]))
}

/// One synthetic design.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub n: usize,
    pub n_sites: usize,
    /// Non-intercept covariates shared by both design matrices.
    pub covariates: usize,
    pub zero_setting: ZeroSetting,
    /// `|A_mean ∩ A_disp| / |A_mean ∪ A_disp|` of the true active sets.
    pub overlap: f64,
    /// `None` generates data without a spatial effect.
    pub pattern: Option<SpatialPattern>,
    pub xi: f64,
    /// Overrides [`ZeroSetting::default_beta0`].
    pub beta0: Option<f64>,
}

impl Scenario {
    pub fn new(n: usize, n_sites: usize, zero_setting: ZeroSetting, overlap: f64, pattern: Option<SpatialPattern>) -> Self {
        Scenario {
            n,
            n_sites,
            covariates: 9,
            zero_setting,
            overlap,
            pattern,
            xi: 1.5,
            beta0: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.covariates == 0 {
            return Err(Error::Config("scenario needs observations and covariates".into()));
        }
        if self.pattern.is_some() && self.n_sites == 0 {
            return Err(Error::Config("spatial scenario needs at least one site".into()));
        }
        TweedieIndex::new(self.xi)?;
        active_sets(self.covariates, self.overlap)?;
        Ok(())
    }
}

/// Largest active-set size `k ≤ ⌊m/2⌋` (with `s` shared covariates) whose
/// overlap `s/(2k−s)` equals the request. Returns zero-based covariate
/// indices for the mean and dispersion models.
pub fn active_sets(m: usize, overlap: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&overlap) {
        return Err(Error::UnrealizableOverlap { overlap, covariates: m });
    }
    for k in (1..=(m / 2).max(1)).rev() {
        for s in 0..=k {
            if 2 * k - s <= m && (s as f64 / (2 * k - s) as f64 - overlap).abs() < 1e-12 {
                let mean = (0..k).collect();
                let disp = (k - s..2 * k - s).collect();
                return Ok((mean, disp));
            }
        }
    }
    Err(Error::UnrealizableOverlap { overlap, covariates: m })
}

/// Ground truth behind a synthetic data set.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth {
    /// Column names shared by `X` and `Z` (`intercept`, `v1`, ...).
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Empty without a spatial pattern.
    pub w: Vec<f64>,
    pub xi: f64,
    /// Names of the active non-intercept covariates.
    pub active_mean: Vec<String>,
    pub active_dispersion: Vec<String>,
    pub overlap: f64,
}

/// A generated data set.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub obs: ObservationSet,
    pub domain: Option<SpatialDomain>,
    pub truth: SyntheticTruth,
}

/// Draws covariates, coefficients, spatial effects and CP-g responses.
pub fn generate_dataset<R: Rng + ?Sized>(scenario: &Scenario, rng: &mut R) -> Result<SyntheticData> {
    scenario.validate()?;
    let (n, m) = (scenario.n, scenario.covariates);
    let (act_mean, act_disp) = active_sets(m, scenario.overlap)?;
    let row = scenario.zero_setting.row();

    let mut cov = Matrix::from_fn(n, m, |_, _| rng.sample(StandardNormal));
    standardize_columns(&mut cov);
    let design = Matrix::from_fn(n, m + 1, |i, j| if j == 0 { 1.0 } else { cov[(i, j - 1)] });
    let mut names = vec![String::from("intercept")];
    names.extend((1..=m).map(|j| format!("v{j}")));

    let nb = Normal::new(row.mu_beta, row.sd_beta).map_err(|e| domain(format!("{e}")))?;
    let ng = Normal::new(row.mu_gamma, row.sd_gamma).map_err(|e| domain(format!("{e}")))?;
    let mut beta = vec![0.0; m + 1];
    let mut gamma = vec![0.0; m + 1];
    beta[0] = scenario
        .beta0
        .unwrap_or_else(|| scenario.zero_setting.default_beta0(scenario.pattern));
    gamma[0] = row.gamma0;
    for &j in &act_mean {
        beta[j + 1] = nb.sample(rng);
    }
    for &j in &act_disp {
        gamma[j + 1] = ng.sample(rng);
    }

    let (domain, w, loc, n_sites) = match scenario.pattern {
        None => (None, Vec::new(), vec![0; n], 1),
        Some(pattern) => {
            let l = scenario.n_sites;
            let coords: Vec<[f64; 2]> = (0..l).map(|_| [rng.random(), rng.random()]).collect();
            let dom = SpatialDomain::new(coords)?;
            let mut w = spatial_effects(&dom, pattern, rng)?;
            if matches!(pattern, SpatialPattern::GpDraw { .. }) {
                // Center the realization so the intercept keeps its meaning.
                let mean = w.iter().sum::<f64>() / l as f64;
                w.iter_mut().for_each(|v| *v -= mean);
            }
            let loc = (0..n).map(|_| rng.random_range(0..l)).collect();
            (Some(dom), w, loc, l)
        }
    };

    let xi = TweedieIndex::new(scenario.xi)?;
    let mut y = Vec::with_capacity(n);
    for k in 0..n {
        let xk = design.row(k);
        let mut eta_mu = crate::linalg::dot(xk, &beta);
        if !w.is_empty() {
            let site: usize = loc[k];
            eta_mu += w[site];
        }
        let eta_phi = crate::linalg::dot(xk, &gamma);
        let params = TweedieParams::new(libm::exp(eta_mu), libm::exp(eta_phi), xi)?;
        y.push(sample_cpg(&params, rng));
    }
    let obs = ObservationSet::new(y, vec![1.0; n], loc, n_sites, design.clone(), design)?
        .with_names(names.clone(), names.clone())?;
    let name = |j: &usize| names[j + 1].clone();
    let truth = SyntheticTruth {
        beta,
        gamma,
        w,
        xi: scenario.xi,
        active_mean: act_mean.iter().map(name).collect(),
        active_dispersion: act_disp.iter().map(name).collect(),
        overlap: scenario.overlap,
        names,
    };
    Ok(SyntheticData { obs, domain, truth })
}

#[inline]
fn sq(x: f64) -> f64 {
    x * x
}

fn standardize_columns(m: &mut Matrix) {
    let (n, p) = (m.rows(), m.cols());
    if n < 2 {
        return;
    }
    for j in 0..p {
        let mean = (0..n).map(|i| m[(i, j)]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| sq(m[(i, j)] - mean)).sum::<f64>() / (n - 1) as f64;
        let sd = libm::sqrt(var);
        for i in 0..n {
            m[(i, j)] = if sd > 0.0 { (m[(i, j)] - mean) / sd } else { 0.0 };
        }
    }
}

/// One realization of the spatial effect at every site.
pub fn spatial_effects<R: Rng + ?Sized>(dom: &SpatialDomain, pattern: SpatialPattern, rng: &mut R) -> Result<Vec<f64>> {
    match pattern {
        SpatialPattern::Deterministic => Ok(dom
            .coords()
            .iter()
            .map(|&s| deterministic_surface(s) + rng.sample::<f64, _>(StandardNormal))
            .collect()),
        SpatialPattern::GpDraw { sigma2, phi_s, nu } => {
            let cov = MaternKernel::new(sigma2, phi_s, nu)?.covariance(dom);
            let chol = Cholesky::new(&cov, 0.0)?;
            let z: Vec<f64> = (0..dom.n_sites()).map(|_| rng.sample(StandardNormal)).collect();
            Ok(chol.mul_lower(&z))
        }
    }
}

/// Recovery metrics of one fit against the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct FitMetrics {
    pub mse_beta: f64,
    pub mse_gamma: f64,
    pub mse_xi: f64,
    /// `None` for non-spatial fits.
    pub mse_w: Option<f64>,
    /// Fraction of coefficients whose true value lies in the 95% HPD interval.
    pub cp_beta: f64,
    pub cp_gamma: f64,
    pub cp_w: Option<f64>,
    /// Pooled over mean and dispersion non-intercept covariates.
    pub fpr: Option<f64>,
    pub tpr: Option<f64>,
    /// Overlap of the selected mean and dispersion covariates.
    pub overlap: Option<f64>,
}

impl FitMetrics {
    /// Coverage pooled over β and γ.
    pub fn cp_coefficients(&self, p: usize, q: usize) -> f64 {
        (self.cp_beta * p as f64 + self.cp_gamma * q as f64) / (p + q) as f64
    }
}

/// `|a ∩ b| / |a ∪ b|` (zero when both are empty).
pub fn set_overlap(a: &[&str], b: &[&str]) -> f64 {
    let inter = a.iter().filter(|x| b.contains(x)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// `(FPR, TPR)` of `selected` against the active set over `candidates`.
pub fn selection_rates(selected: &[&str], active: &[&str], candidates: &[&str]) -> (f64, f64) {
    let (mut fp, mut tp, mut neg, mut pos) = (0usize, 0usize, 0usize, 0usize);
    for c in candidates {
        let is_active = active.contains(c);
        let is_sel = selected.contains(c);
        if is_active {
            pos += 1;
            tp += is_sel as usize;
        } else {
            neg += 1;
            fp += is_sel as usize;
        }
    }
    let rate = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    (rate(fp, neg), rate(tp, pos))
}

struct Estimate {
    median: f64,
    lower: f64,
    upper: f64,
}

fn estimate(draws: &[f64]) -> Estimate {
    let mut s = draws.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let m = s.len();
    let median = if m % 2 == 1 { s[m / 2] } else { 0.5 * (s[m / 2 - 1] + s[m / 2]) };
    let (lower, upper) = hpd_sorted(&s, 0.95);
    Estimate { median, lower, upper }
}

fn score(ests: &[Estimate], truth: &[f64]) -> (f64, f64) {
    let n = ests.len().max(1) as f64;
    let mse = ests.iter().zip(truth).map(|(e, t)| sq(e.median - t)).sum::<f64>() / n;
    let cp = ests
        .iter()
        .zip(truth)
        .filter(|(e, &t)| e.lower <= t && t <= e.upper)
        .count() as f64
        / n;
    (mse, cp)
}

/// Compares a chain (and optionally its selection) with the truth.
///
/// Spatial fits are compared after hierarchical centering: the effective
/// intercept `β₀ + mean(w)` against the per-draw mean of the fitted effects
/// (plus any fitted intercept), and centered effects against centered truth.
pub fn evaluate_fit(truth: &SyntheticTruth, chain: &ChainOutput, selection: Option<&ModelSelection>) -> Result<FitMetrics> {
    if chain.kept() < 2 {
        return Err(Error::InsufficientDraws { needed: 2, found: chain.kept() });
    }
    let spatial = chain.model.is_spatial() && !truth.w.is_empty();
    let w_draws = chain.family("w[");
    let centered = if spatial {
        check_len("spatial effects", truth.w.len(), w_draws.cols())?;
        Some(hierarchical_center(&w_draws)?)
    } else {
        None
    };
    let w_true_mean = if truth.w.is_empty() {
        0.0
    } else {
        truth.w.iter().sum::<f64>() / truth.w.len() as f64
    };

    let mut beta_est = Vec::new();
    let mut beta_true = Vec::new();
    for (j, name) in truth.names.iter().enumerate() {
        let col = chain.column(&format!("beta[{name}]"));
        let intercept = j == 0;
        let draws = match (col, intercept, &centered) {
            (Some(c), true, Some((b0, _))) => c.iter().zip(b0).map(|(a, b)| a + b).collect(),
            (None, true, Some((b0, _))) => b0.clone(),
            (Some(c), _, _) => c,
            (None, _, _) => continue,
        };
        beta_est.push(estimate(&draws));
        beta_true.push(if intercept && spatial { truth.beta[0] + w_true_mean } else { truth.beta[j] });
    }
    let mut gamma_est = Vec::new();
    let mut gamma_true = Vec::new();
    for (j, name) in truth.names.iter().enumerate() {
        if let Some(c) = chain.column(&format!("gamma[{name}]")) {
            gamma_est.push(estimate(&c));
            gamma_true.push(truth.gamma[j]);
        }
    }
    let (mse_beta, cp_beta) = score(&beta_est, &beta_true);
    let (mse_gamma, cp_gamma) = score(&gamma_est, &gamma_true);
    let xi_hat = median_state(chain)?.xi.value();

    let (mse_w, cp_w) = match &centered {
        Some((_, cw)) => {
            let ests: Vec<Estimate> = (0..cw.cols()).map(|i| estimate(&cw.column(i))).collect();
            let t: Vec<f64> = truth.w.iter().map(|v| v - w_true_mean).collect();
            let (a, b) = score(&ests, &t);
            (Some(a), Some(b))
        }
        None => (None, None),
    };

    let (fpr, tpr, overlap) = match selection {
        Some(sel) => {
            let cands: Vec<&str> = truth.names[1..].iter().map(String::as_str).collect();
            let sm: Vec<&str> = sel.selected_mean().into_iter().filter(|n| cands.contains(n)).collect();
            let sd: Vec<&str> = sel.selected_dispersion().into_iter().filter(|n| cands.contains(n)).collect();
            let am: Vec<&str> = truth.active_mean.iter().map(String::as_str).collect();
            let ad: Vec<&str> = truth.active_dispersion.iter().map(String::as_str).collect();
            let (fm, tm) = selection_rates(&sm, &am, &cands);
            let (fd, td) = selection_rates(&sd, &ad, &cands);
            let (nm, nd) = ((cands.len() - am.len()) as f64, (cands.len() - ad.len()) as f64);
            let (pm, pd) = (am.len() as f64, ad.len() as f64);
            let pool = |a: f64, wa: f64, b: f64, wb: f64| if wa + wb > 0.0 { (a * wa + b * wb) / (wa + wb) } else { 0.0 };
            (
                Some(pool(fm, nm, fd, nd)),
                Some(pool(tm, pm, td, pd)),
                Some(set_overlap(&sm, &sd)),
            )
        }
        None => (None, None, None),
    };

    Ok(FitMetrics {
        mse_beta,
        mse_gamma,
        mse_xi: sq(xi_hat - truth.xi),
        mse_w,
        cp_beta,
        cp_gamma,
        cp_w,
        fpr,
        tpr,
        overlap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samplers::chain_rng;

    #[test]
    fn active_set_sizes() {
        let (a, b) = active_sets(9, 1.0).unwrap();
        assert_eq!((a.len(), a == b), (4, true));
        let (a, b) = active_sets(9, 0.0).unwrap();
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|x| !b.contains(x)));
        let (a, b) = active_sets(9, 0.5).unwrap();
        let inter = a.iter().filter(|x| b.contains(x)).count();
        let union = a.len() + b.len() - inter;
        assert_eq!(inter as f64 / union as f64, 0.5);
        assert!(active_sets(9, 0.3).is_err());
        assert!(active_sets(9, 1.5).is_err());
    }

    #[test]
    fn overlap_and_rates() {
        assert_eq!(set_overlap(&["a", "b"], &["a", "b"]), 1.0);
        assert_eq!(set_overlap(&["a"], &["b"]), 0.0);
        assert_eq!(set_overlap(&["a", "b", "c"], &["b", "c", "d"]), 0.5);
        assert_eq!(set_overlap(&["b", "c", "d"], &["a", "b", "c"]), 0.5);
        let (f, t) = selection_rates(&["a", "b"], &["a", "b"], &["a", "b", "c", "d"]);
        assert_eq!((f, t), (0.0, 1.0));
    }

    #[test]
    fn dataset_is_deterministic_and_shaped() {
        let sc = Scenario::new(300, 20, ZeroSetting::P30, 1.0, Some(SpatialPattern::gp_default()));
        let a = generate_dataset(&sc, &mut chain_rng(3, 0)).unwrap();
        let b = generate_dataset(&sc, &mut chain_rng(3, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.obs.n(), a.obs.p(), a.obs.q(), a.obs.n_sites()), (300, 10, 10, 20));
        assert_eq!(a.truth.w.len(), 20);
        assert_eq!(a.truth.active_mean, a.truth.active_dispersion);
        for j in 1..10 {
            let col = a.obs.x().column(j);
            let mean = col.iter().sum::<f64>() / 300.0;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_pattern_follows_surface() {
        let dom = SpatialDomain::new((0..2000).map(|i| [(i % 7) as f64 / 7.0, (i % 11) as f64 / 11.0]).collect()).unwrap();
        let w = spatial_effects(&dom, SpatialPattern::Deterministic, &mut chain_rng(1, 0)).unwrap();
        let resid: Vec<f64> = w.iter().zip(dom.coords()).map(|(w, &s)| w - deterministic_surface(s)).collect();
        let mean = resid.iter().sum::<f64>() / 2000.0;
        let var = resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / 1999.0;
        assert!(mean.abs() < 0.1 && (var - 1.0).abs() < 0.1);
    }

    #[test]
    fn realized_zero_fractions_near_targets() {
        for z in ZeroSetting::ALL {
            for pattern in [None, Some(SpatialPattern::gp_default()), Some(SpatialPattern::Deterministic)] {
                let sc = Scenario::new(5000, 100, z, 1.0, pattern);
                let d = generate_dataset(&sc, &mut chain_rng(17, 0)).unwrap();
                let f = d.obs.zero_fraction();
                assert!((f - z.fraction()).abs() <= 0.10, "{z:?} {pattern:?}: {f}");
            }
        }
    }

    #[test]
    fn zero_fraction_monotone_in_gamma0() {
        let mut last = 0.0;
        for z in ZeroSetting::ALL {
            let mut sc = Scenario::new(4000, 1, z, 1.0, None);
            sc.beta0 = Some(1.0);
            let f = generate_dataset(&sc, &mut chain_rng(5, 0)).unwrap().obs.zero_fraction();
            assert!(f >= last - 0.01, "{z:?}: {f} < {last}");
            last = f;
        }
    }
}
