//! Spike-and-slab priors and Bayesian FDR selection.
//!
//! Each coefficient `c_u` has prior `N(0, ζ_u σ²_u)` with `ζ_u ∈ {ν0, 1}`,
//! `P(ζ_u = 1) = α`, `σ⁻²_u ~ Gamma(a, b)` and `α ~ U(0, 1)`. All latents have
//! closed-form full conditionals.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma};

use crate::error::{domain, Error, Result};
use crate::linalg::Matrix;
use crate::samplers::ChainOutput;
use crate::special::ln_gamma;

/// Latent variables of one spike-and-slab block.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeSlabLatents {
    /// `ζ_u`, either `nu0` or `1`.
    pub zeta: Vec<f64>,
    /// `σ²_u`.
    pub sigma2: Vec<f64>,
    /// Slab probability `α`.
    pub alpha: f64,
    pub nu0: f64,
}

impl SpikeSlabLatents {
    /// Every coefficient in the slab with unit variance, `α = ½`.
    pub fn slab(n: usize, nu0: f64) -> Self {
        SpikeSlabLatents {
            zeta: vec![1.0; n],
            sigma2: vec![1.0; n],
            alpha: 0.5,
            nu0,
        }
    }

    pub fn len(&self) -> usize {
        self.zeta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zeta.is_empty()
    }

    /// `1/(ζ_u σ²_u)`.
    pub fn prior_precisions(&self) -> Vec<f64> {
        self.zeta
            .iter()
            .zip(&self.sigma2)
            .map(|(z, s)| 1.0 / (z * s))
            .collect()
    }

    /// Whether `ζ_u = 1`.
    pub fn in_slab(&self, u: usize) -> bool {
        self.zeta[u] == 1.0
    }

    pub fn slab_count(&self) -> usize {
        (0..self.len()).filter(|&u| self.in_slab(u)).count()
    }

    /// Log prior of `(ζ, σ⁻², α)` given the Gamma(a, b) precision prior.
    pub fn log_prior(&self, a: f64, b: f64) -> f64 {
        let mut lp = 0.0;
        for u in 0..self.len() {
            lp += if self.in_slab(u) {
                libm::log(self.alpha)
            } else {
                libm::log1p(-self.alpha)
            };
            let prec = 1.0 / self.sigma2[u];
            lp += a * libm::log(b) - ln_gamma(a) + (a - 1.0) * libm::log(prec) - b * prec;
        }
        lp
    }
}

/// `(log α1, log α2)` for the spike and slab states of one coefficient.
pub fn indicator_log_weights(c: f64, sigma2: f64, alpha: f64, nu0: f64) -> (f64, f64) {
    let spike = libm::log1p(-alpha) - 0.5 * libm::log(nu0) - c * c / (2.0 * nu0 * sigma2);
    let slab = libm::log(alpha) - c * c / (2.0 * sigma2);
    (spike, slab)
}

/// Probability of the slab state, `α2/(α1+α2)`.
pub fn slab_probability(c: f64, sigma2: f64, alpha: f64, nu0: f64) -> f64 {
    let (l1, l2) = indicator_log_weights(c, sigma2, alpha, nu0);
    1.0 / (1.0 + libm::exp(l1 - l2))
}

/// Draws `ζ_u` for every coefficient.
pub fn update_indicators<R: Rng + ?Sized>(coefs: &[f64], lat: &mut SpikeSlabLatents, rng: &mut R) {
    for (u, &c) in coefs.iter().enumerate() {
        let p = slab_probability(c, lat.sigma2[u], lat.alpha, lat.nu0);
        lat.zeta[u] = if rng.random::<f64>() < p { 1.0 } else { lat.nu0 };
    }
}

/// Draws `σ⁻²_u ~ Gamma(a + ½, b + c_u²/(2ζ_u))`.
pub fn update_variances<R: Rng + ?Sized>(
    coefs: &[f64],
    lat: &mut SpikeSlabLatents,
    a: f64,
    b: f64,
    rng: &mut R,
) -> Result<()> {
    for (u, &c) in coefs.iter().enumerate() {
        let rate = b + c * c / (2.0 * lat.zeta[u]);
        let g = Gamma::new(a + 0.5, 1.0 / rate).map_err(|e| domain(alloc::format!("{e}")))?;
        lat.sigma2[u] = 1.0 / g.sample(rng);
    }
    Ok(())
}

/// Draws `α ~ Beta(1 + #slab, 1 + #spike)`.
pub fn update_alpha<R: Rng + ?Sized>(lat: &mut SpikeSlabLatents, rng: &mut R) -> Result<()> {
    let ones = lat.slab_count() as f64;
    let spikes = lat.len() as f64 - ones;
    let beta = Beta::new(1.0 + ones, 1.0 + spikes).map_err(|e| domain(alloc::format!("{e}")))?;
    lat.alpha = beta.sample(rng);
    Ok(())
}

/// One Gibbs sweep over `ζ`, `σ⁻²` and `α` given the coefficients.
pub fn gibbs_spike_slab<R: Rng + ?Sized>(
    coefs: &[f64],
    lat: &mut SpikeSlabLatents,
    a: f64,
    b: f64,
    rng: &mut R,
) -> Result<()> {
    crate::error::check_len("spike-and-slab coefficients", lat.len(), coefs.len())?;
    update_indicators(coefs, lat, rng);
    update_variances(coefs, lat, a, b, rng)?;
    update_alpha(lat, rng)
}

/// Result of Bayesian FDR selection.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionReport {
    /// `p_u = P(|c_u| <= c | data)`, estimated from draws.
    pub p_values: Vec<f64>,
    /// Threshold `κ`; `None` when no coefficient qualifies.
    pub kappa: Option<f64>,
    pub selected: Vec<bool>,
    pub c: f64,
    pub alpha_level: f64,
}

impl SelectionReport {
    pub fn selected_indices(&self) -> Vec<usize> {
        (0..self.selected.len()).filter(|&u| self.selected[u]).collect()
    }
}

/// Posterior-probability estimate `p_u = mean(|draw_u| <= c)` per column.
pub fn exclusion_probabilities(draws: &Matrix, c: f64) -> Vec<f64> {
    let m = draws.rows();
    (0..draws.cols())
        .map(|u| (0..m).filter(|&i| draws[(i, u)].abs() <= c).count() as f64 / m as f64)
        .collect()
}

/// Bayesian FDR rule. With `p` sorted ascending, `κ = p_(u*)` where `u*` is the
/// largest rank whose running mean of `p` is at most `alpha`; coefficients
/// with `p_u <= κ` are selected.
pub fn fdr_select(draws: &Matrix, c: f64, alpha: f64) -> Result<SelectionReport> {
    if draws.rows() == 0 {
        return Err(Error::InsufficientDraws { needed: 1, found: 0 });
    }
    if !(c > 0.0) || !(alpha > 0.0 && alpha < 1.0) {
        return Err(domain("fdr_select needs c > 0 and alpha in (0, 1)"));
    }
    let p_values = exclusion_probabilities(draws, c);
    let kappa = fdr_threshold(&p_values, alpha);
    let selected = p_values
        .iter()
        .map(|&p| kappa.is_some_and(|k| p <= k))
        .collect();
    Ok(SelectionReport {
        p_values,
        kappa,
        selected,
        c,
        alpha_level: alpha,
    })
}

/// FDR selection applied separately to the mean and dispersion coefficients
/// of a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSelection {
    /// Covariate names (without the `beta[`/`gamma[` wrapper).
    pub mean_names: Vec<String>,
    pub dispersion_names: Vec<String>,
    pub mean: SelectionReport,
    pub dispersion: SelectionReport,
}

impl ModelSelection {
    pub fn selected_mean(&self) -> Vec<&str> {
        selected_names(&self.mean_names, &self.mean)
    }

    pub fn selected_dispersion(&self) -> Vec<&str> {
        selected_names(&self.dispersion_names, &self.dispersion)
    }
}

fn selected_names<'a>(names: &'a [String], r: &SelectionReport) -> Vec<&'a str> {
    names
        .iter()
        .zip(&r.selected)
        .filter(|(_, &s)| s)
        .map(|(n, _)| n.as_str())
        .collect()
}

fn family(chain: &ChainOutput, prefix: &str) -> (Vec<String>, Matrix) {
    let names = chain
        .param_names
        .iter()
        .filter_map(|n| n.strip_prefix(prefix).and_then(|r| r.strip_suffix(']')))
        .map(String::from)
        .collect();
    (names, chain.family(prefix))
}

/// Runs [`fdr_select`] on the `beta[..]` and `gamma[..]` columns of a chain.
pub fn select_chain(chain: &ChainOutput, c: f64, alpha: f64) -> Result<ModelSelection> {
    let (mean_names, bd) = family(chain, "beta[");
    let (dispersion_names, gd) = family(chain, "gamma[");
    Ok(ModelSelection {
        mean: fdr_select(&bd, c, alpha)?,
        dispersion: fdr_select(&gd, c, alpha)?,
        mean_names,
        dispersion_names,
    })
}

/// `κ` from exclusion probabilities.
pub fn fdr_threshold(p_values: &[f64], alpha: f64) -> Option<f64> {
    let mut sorted = p_values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut sum = 0.0;
    let mut kappa = None;
    for (i, &p) in sorted.iter().enumerate() {
        sum += p;
        // p-values are multiples of 1/M, so exact ties with alpha are common;
        // a few ulps of slack keep them on the inclusive side.
        if sum <= alpha * (i + 1) as f64 * (1.0 + 1e-12) {
            kappa = Some(p);
        }
    }
    kappa
}
