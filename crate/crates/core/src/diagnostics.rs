//! Posterior summaries, autocorrelation and effective sample size, AIC and
//! out-of-sample scoring.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{check_len, domain, Error, Result};
use crate::model::{linear_predictors, ModelId, ModelState, ObservationSet};
use crate::samplers::ChainOutput;
use crate::tweedie::unit_deviance;

/// Point estimates and a highest-posterior-density interval of one parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorSummary {
    /// Draw at the kept iteration with the largest joint log-posterior.
    pub map_estimate: f64,
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
    pub hpd_lower: f64,
    pub hpd_upper: f64,
    pub hpd_prob: f64,
}

/// Summarizes one parameter's draws. `joint_logpost[i]` belongs to `draws[i]`.
pub fn summarize(draws: &[f64], joint_logpost: &[f64], hpd_prob: f64) -> Result<PosteriorSummary> {
    let m = draws.len();
    if m < 2 {
        return Err(Error::InsufficientDraws { needed: 2, found: m });
    }
    check_len("joint log-posterior trace", m, joint_logpost.len())?;
    if !(hpd_prob > 0.0 && hpd_prob <= 1.0) {
        return Err(domain(format!("hpd_prob must lie in (0, 1], got {hpd_prob}")));
    }
    let mean = draws.iter().sum::<f64>() / m as f64;
    let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1) as f64;
    let mut sorted = draws.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median = if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    };
    let (hpd_lower, hpd_upper) = hpd_sorted(&sorted, hpd_prob);
    let map_index = (0..m)
        .max_by(|&a, &b| joint_logpost[a].total_cmp(&joint_logpost[b]))
        .expect("nonempty");
    Ok(PosteriorSummary {
        map_estimate: draws[map_index],
        mean,
        median,
        sd: libm::sqrt(var),
        hpd_lower,
        hpd_upper,
        hpd_prob,
    })
}

/// Shortest window of `⌈prob·M⌉` consecutive order statistics.
pub fn hpd_sorted(sorted: &[f64], prob: f64) -> (f64, f64) {
    let m = sorted.len();
    let k = (libm::ceil(prob * m as f64) as usize).clamp(1, m);
    let mut best = 0;
    for i in 1..=(m - k) {
        if sorted[i + k - 1] - sorted[i] < sorted[best + k - 1] - sorted[best] {
            best = i;
        }
    }
    (sorted[best], sorted[best + k - 1])
}

/// Summaries of every stored parameter, in column order.
pub fn summarize_chain(chain: &ChainOutput, hpd_prob: f64) -> Result<Vec<(String, PosteriorSummary)>> {
    (0..chain.param_names.len())
        .map(|j| {
            let s = summarize(&chain.draws.column(j), &chain.log_posterior, hpd_prob)?;
            Ok((chain.param_names[j].clone(), s))
        })
        .collect()
}

/// Autocorrelations up to `max_lag` and the initial-positive-sequence ESS.
#[derive(Debug, Clone, PartialEq)]
pub struct AcfEss {
    pub acf: Vec<f64>,
    pub ess: f64,
    /// Zero-variance input; `ess` is set to `M` by convention.
    pub degenerate: bool,
}

/// Sample autocorrelation at `lag`, with lag-specific normalization
/// `(1/(M−k)) Σ (x_t − x̄)(x_{t+k} − x̄) / v`, `v = (1/M) Σ (x_t − x̄)²`.
fn autocorrelation(centered: &[f64], var: f64, lag: usize) -> f64 {
    let m = centered.len();
    let s: f64 = (0..m - lag).map(|t| centered[t] * centered[t + lag]).sum();
    s / (m - lag) as f64 / var
}

pub fn ess_acf(draws: &[f64], max_lag: usize) -> Result<AcfEss> {
    let m = draws.len();
    if m < 10 {
        return Err(Error::InsufficientDraws { needed: 10, found: m });
    }
    let mean = draws.iter().sum::<f64>() / m as f64;
    let centered: Vec<f64> = draws.iter().map(|x| x - mean).collect();
    let var = centered.iter().map(|x| x * x).sum::<f64>() / m as f64;
    let max_lag = max_lag.min(m - 1);
    if !(var > 0.0) {
        let mut acf = alloc::vec![0.0; max_lag + 1];
        acf[0] = 1.0;
        return Ok(AcfEss {
            acf,
            ess: m as f64,
            degenerate: true,
        });
    }
    let acf: Vec<f64> = (0..=max_lag)
        .map(|k| if k == 0 { 1.0 } else { autocorrelation(&centered, var, k) })
        .collect();
    let rho = |k: usize| {
        if k <= max_lag {
            acf[k]
        } else {
            autocorrelation(&centered, var, k)
        }
    };
    // Geyer: sum Γ_j = ρ_{2j} + ρ_{2j+1} while positive.
    let mut sum = 0.0;
    let mut j = 0;
    while 2 * j + 1 < m {
        let gamma = rho(2 * j) + rho(2 * j + 1);
        if gamma <= 0.0 {
            break;
        }
        sum += gamma;
        j += 1;
    }
    let tau = (2.0 * sum - 1.0).max(1.0 / m as f64);
    let ess = (m as f64 / tau).min(m as f64);
    Ok(AcfEss {
        acf,
        ess,
        degenerate: false,
    })
}

/// Number of parameters counted by AIC.
pub fn param_count(model: ModelId, p: usize, q: usize, l: usize) -> usize {
    match model {
        ModelId::M1 => p + q + 1,
        ModelId::M2 => 3 * p + 3 * q + 1,
        ModelId::M3 => p + q + l + 4,
        ModelId::M4 => 3 * p + 3 * q + l + 4,
    }
}

/// `−2 loglik + 2 k`.
pub fn aic(loglik: f64, model: ModelId, p: usize, q: usize, l: usize) -> f64 {
    -2.0 * loglik + 2.0 * param_count(model, p, q, l) as f64
}

/// Out-of-sample means, dispersions and `√(Σ d(y | μ̂, ξ̂))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mu: Vec<f64>,
    pub phi: Vec<f64>,
    pub sqrt_deviance: f64,
}

/// Scores `new_obs` at the point estimate `point`. Spatial models need every
/// location of `new_obs` to have a fitted effect.
pub fn predict(point: &ModelState, new_obs: &ObservationSet, model: ModelId) -> Result<Prediction> {
    if model.is_spatial() {
        let l = point.w.len();
        if let Some((k, &site)) = new_obs.loc().iter().enumerate().find(|(_, &s)| s >= l) {
            return Err(domain(format!(
                "row {k} is at site {site}, which has no fitted spatial effect ({l} sites)"
            )));
        }
        if new_obs.n_sites() != l {
            let mut padded = point.clone();
            padded.w.resize(new_obs.n_sites(), 0.0);
            return predict_inner(&padded, new_obs, model);
        }
    }
    predict_inner(point, new_obs, model)
}

fn predict_inner(point: &ModelState, new_obs: &ObservationSet, model: ModelId) -> Result<Prediction> {
    let pred = linear_predictors(point, new_obs, model)?;
    let xi = point.xi.value();
    let total: f64 = new_obs
        .y()
        .iter()
        .zip(&pred.mu)
        .map(|(&y, &mu)| unit_deviance(y, mu, xi))
        .sum();
    Ok(Prediction {
        mu: pred.mu,
        phi: pred.phi,
        sqrt_deviance: libm::sqrt(total),
    })
}

/// Model state built from the posterior medians of a chain (selection
/// latents are copied from the final state).
pub fn median_state(chain: &ChainOutput) -> Result<ModelState> {
    let med = |name: &str| -> Result<f64> {
        let col = chain
            .column(name)
            .ok_or_else(|| Error::Config(format!("chain has no column {name}")))?;
        if col.is_empty() {
            return Err(Error::InsufficientDraws { needed: 1, found: 0 });
        }
        let mut s = col;
        s.sort_by(|a, b| a.total_cmp(b));
        let m = s.len();
        Ok(if m % 2 == 1 { s[m / 2] } else { 0.5 * (s[m / 2 - 1] + s[m / 2]) })
    };
    let mut state = chain.final_state.clone();
    let prefixed = |prefix: &str| -> Vec<String> {
        chain
            .param_names
            .iter()
            .filter(|n| n.starts_with(prefix))
            .cloned()
            .collect()
    };
    for (v, name) in state.beta.iter_mut().zip(prefixed("beta[")) {
        *v = med(&name)?;
    }
    for (v, name) in state.gamma.iter_mut().zip(prefixed("gamma[")) {
        *v = med(&name)?;
    }
    state.xi = crate::tweedie::TweedieIndex::new(med("xi")?)?;
    if chain.model.is_spatial() {
        for (v, name) in state.w.iter_mut().zip(prefixed("w[")) {
            *v = med(&name)?;
        }
        state.sigma2 = med("sigma2")?;
        state.phi_s = med("phi_s")?;
    }
    Ok(state)
}
