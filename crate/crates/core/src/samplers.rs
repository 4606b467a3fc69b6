//! MCMC kernels and the per-iteration update schedule.
//!
//! One iteration updates, in order: the mean block `(β, w)` by preconditioned
//! MALA, `γ` by MALA (or a preconditioned random walk), `ξ` and `φ_s` by
//! random-walk Metropolis-Hastings, `σ²` by its conjugate Gamma draw and the
//! spike-and-slab latents by Gibbs. Step sizes adapt on the log scale during
//! burn-in and are frozen afterwards, as are the Fisher preconditioners.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{check_len, Error, Result};
use crate::linalg::{dot, Cholesky, Matrix};
use crate::model::{
    beta_prior_precision, disp_eta, gamma_prior_precision, linear_predictors, log_prior, mean_eta,
    phis_kernel, phis_log_density, DispersionLikelihood, DispersionTarget, GradientMode, Hyperparameters,
    MeanTarget, ModelId, ModelState, ObservationSet, ProcessPrior, XiTarget, ETA_CLAMP,
};
use crate::selection::gibbs_spike_slab;
use crate::spatial::{CholState, SpatialDomain};
use crate::tweedie::TweedieIndex;

/// Length of the acceptance ring buffers.
pub const ACCEPT_WINDOW: usize = 100;

/// Proposal covariance `A = I⁻¹` given through the Cholesky factor `C` of
/// the information `I = C Cᵀ` (identity when absent).
#[derive(Debug, Clone, PartialEq)]
pub struct Preconditioner {
    dim: usize,
    info: Option<Cholesky>,
}

impl Preconditioner {
    pub fn identity(dim: usize) -> Self {
        Preconditioner { dim, info: None }
    }

    /// Factorizes an information matrix; falls back to the identity when it
    /// is not positive definite after the jitter ladder.
    pub fn from_information(info: &Matrix) -> Self {
        let dim = info.rows();
        let ok = info.as_slice().iter().all(|v| v.is_finite());
        match ok.then(|| Cholesky::new(info, 0.0)) {
            Some(Ok(c)) => Preconditioner { dim, info: Some(c) },
            Some(Err(e)) => {
                log::warn!("preconditioner falls back to identity: {e}");
                Self::identity(dim)
            }
            None => {
                log::warn!("non-finite information matrix; using identity preconditioner");
                Self::identity(dim)
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_identity(&self) -> bool {
        self.info.is_none()
    }

    /// `A g`.
    pub fn apply(&self, g: &[f64]) -> Vec<f64> {
        match &self.info {
            Some(c) => c.solve(g),
            None => g.to_vec(),
        }
    }

    /// `A^{1/2} ε = C^{-T} ε`.
    pub fn noise(&self, eps: &mut [f64]) {
        if let Some(c) = &self.info {
            c.solve_upper_in_place(eps);
        }
    }

    /// `vᵀ A⁻¹ v = ‖Cᵀ v‖²`.
    pub fn inverse_norm2(&self, v: &[f64]) -> f64 {
        match &self.info {
            Some(c) => {
                let u = c.mul_upper(v);
                dot(&u, &u)
            }
            None => dot(v, v),
        }
    }
}

/// A point of a differentiable target with cached density and gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LangevinPoint {
    pub x: Vec<f64>,
    pub log_density: f64,
    pub grad: Vec<f64>,
}

impl LangevinPoint {
    pub fn evaluate(x: Vec<f64>, mut target: impl FnMut(&[f64]) -> (f64, Vec<f64>)) -> Self {
        let (log_density, grad) = target(&x);
        LangevinPoint { x, log_density, grad }
    }
}

fn langevin_mean(p: &LangevinPoint, pre: &Preconditioner, tau: f64) -> Vec<f64> {
    let drift = pre.apply(&p.grad);
    let h = 0.5 * tau * tau;
    p.x.iter().zip(drift).map(|(x, d)| x + h * d).collect()
}

/// `log q(to | from)` up to a constant shared by both directions.
fn log_proposal(to: &[f64], from: &LangevinPoint, pre: &Preconditioner, tau: f64) -> f64 {
    let m = langevin_mean(from, pre, tau);
    let diff: Vec<f64> = to.iter().zip(m).map(|(a, b)| a - b).collect();
    -pre.inverse_norm2(&diff) / (2.0 * tau * tau)
}

/// One preconditioned MALA step: `x* = x + (τ²/2) A ∇log π(x) + τ A^{1/2} ε`,
/// accepted with the Metropolis-Hastings ratio including both proposal
/// densities. `target` returns the log-density and its gradient; non-finite
/// proposal densities are rejected.
pub fn mala_step<R: Rng + ?Sized>(
    current: &LangevinPoint,
    mut target: impl FnMut(&[f64]) -> (f64, Vec<f64>),
    pre: &Preconditioner,
    tau: f64,
    rng: &mut R,
) -> (LangevinPoint, bool) {
    let d = current.x.len();
    let mut eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    pre.noise(&mut eps);
    let mean = langevin_mean(current, pre, tau);
    let x: Vec<f64> = mean.iter().zip(&eps).map(|(m, e)| m + tau * e).collect();
    let u: f64 = rng.random();
    if x.iter().any(|v| !v.is_finite()) {
        return (current.clone(), false);
    }
    let proposal = LangevinPoint::evaluate(x, &mut target);
    if !proposal.log_density.is_finite() || proposal.grad.iter().any(|g| !g.is_finite()) {
        return (current.clone(), false);
    }
    let log_ratio = proposal.log_density - current.log_density
        + log_proposal(&current.x, &proposal, pre, tau)
        - log_proposal(&proposal.x, current, pre, tau);
    if libm::log(u) < log_ratio {
        (proposal, true)
    } else {
        (current.clone(), false)
    }
}

/// Gaussian random-walk Metropolis-Hastings on a scalar restricted to the open
/// interval `support`. Returns the new value, its log-density and whether the
/// proposal was accepted.
pub fn rw_step<R: Rng + ?Sized>(
    x: f64,
    log_density: f64,
    mut target: impl FnMut(f64) -> f64,
    step: f64,
    support: (f64, f64),
    rng: &mut R,
) -> (f64, f64, bool) {
    let eps: f64 = rng.sample(StandardNormal);
    let u: f64 = rng.random();
    let prop = x + step * eps;
    if !(prop > support.0 && prop < support.1) {
        return (x, log_density, false);
    }
    let lp = target(prop);
    if lp.is_finite() && libm::log(u) < lp - log_density {
        (prop, lp, true)
    } else {
        (x, log_density, false)
    }
}

/// Conjugate draw `σ⁻² ~ Gamma(a + L/2, b + ½ wᵀR⁻¹w)`; returns `σ²`.
pub fn gibbs_sigma2_process<R: Rng + ?Sized>(
    w: &[f64],
    kernel: &CholState,
    a_sigma: f64,
    b_sigma: f64,
    rng: &mut R,
) -> f64 {
    let shape = a_sigma + 0.5 * w.len() as f64;
    let rate = b_sigma + 0.5 * kernel.quad_form(w);
    let g = Gamma::new(shape, 1.0 / rate).expect("positive Gamma parameters");
    1.0 / g.sample(rng)
}

/// Robbins-Monro update `log τ ← log τ + min(0.05, t^{-1/2})·(rate − target)`.
pub fn adapt_scale(tau: f64, rate: f64, target: f64, iteration: usize) -> f64 {
    let gain = if iteration == 0 {
        0.05
    } else {
        (1.0 / libm::sqrt(iteration as f64)).min(0.05)
    };
    tau * libm::exp(gain * (rate - target))
}

/// Ring buffer of recent accept flags.
#[derive(Debug, Clone, PartialEq)]
pub struct AcceptWindow {
    flags: [bool; ACCEPT_WINDOW],
    next: usize,
    count: usize,
}

impl Default for AcceptWindow {
    fn default() -> Self {
        AcceptWindow {
            flags: [false; ACCEPT_WINDOW],
            next: 0,
            count: 0,
        }
    }
}

impl AcceptWindow {
    pub fn push(&mut self, accepted: bool) {
        self.flags[self.next] = accepted;
        self.next = (self.next + 1) % ACCEPT_WINDOW;
        self.count = (self.count + 1).min(ACCEPT_WINDOW);
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Acceptance rate over the stored flags (`None` when empty).
    pub fn rate(&self) -> Option<f64> {
        if self.count == 0 {
            return None;
        }
        let hits = (0..self.count).filter(|&i| self.flags[i]).count();
        Some(hits as f64 / self.count as f64)
    }
}

/// Proposal scales with their recent acceptance history.
#[derive(Debug, Clone, PartialEq)]
pub struct StepState {
    pub tau_mean: f64,
    pub tau_disp: f64,
    pub step_xi: f64,
    pub step_phis: f64,
    pub window_mean: AcceptWindow,
    pub window_disp: AcceptWindow,
    pub window_xi: AcceptWindow,
    pub window_phis: AcceptWindow,
}

impl StepState {
    fn scales(&self) -> [f64; 4] {
        [self.tau_mean, self.tau_disp, self.step_xi, self.step_phis]
    }

    fn set_scales(&mut self, v: [f64; 4]) {
        [self.tau_mean, self.tau_disp, self.step_xi, self.step_phis] = v;
    }
}

/// Acceptance rates per block over the kept (post burn-in) iterations.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BlockAcceptance {
    pub mean: f64,
    pub dispersion: f64,
    pub xi: f64,
    /// `None` for non-spatial models.
    pub phi_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Counter {
    hits: usize,
    total: usize,
}

impl Counter {
    fn push(&mut self, accepted: bool) {
        self.hits += accepted as usize;
        self.total += 1;
    }

    fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.hits as f64 / self.total as f64
        }
    }
}

/// How the dispersion block `γ` is updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DispersionUpdate {
    /// MALA on the saddlepoint likelihood with its closed-form gradient.
    /// Cheaper, but biased for `ξ` and `γ` when the Poisson rate is small.
    SaddlepointMala,
    /// MALA on the exact series likelihood with a central-difference gradient.
    SeriesMalaNumeric,
    /// MALA on the exact series likelihood with the analytic series gradient.
    #[default]
    SeriesMala,
    /// Preconditioned Gaussian random walk on the exact series likelihood.
    RandomWalk,
}

impl DispersionUpdate {
    fn likelihood(self) -> DispersionLikelihood {
        match self {
            DispersionUpdate::SaddlepointMala => DispersionLikelihood::Saddlepoint,
            _ => DispersionLikelihood::Series,
        }
    }
}

/// Chain length, seeding, initial scales and adaptation targets.
#[derive(Debug, Clone, PartialEq)]
pub struct McmcConfig {
    pub iters: usize,
    pub burnin: usize,
    pub thin: usize,
    pub seed: u64,
    /// ChaCha stream; distinct streams give independent chains from one seed.
    pub stream: u64,
    /// Initial MALA scale of the mean block; `None` uses `1.65·d^{-1/6}`.
    pub tau_mean: Option<f64>,
    pub tau_disp: Option<f64>,
    pub step_xi: f64,
    pub step_phis: f64,
    pub target_mala: f64,
    pub target_rw: f64,
    /// Preconditioner refresh period over the first 80% of burn-in. Scales
    /// adapt throughout burn-in and are frozen at their log-scale average
    /// over its last 20%.
    pub refresh_interval: usize,
    pub dispersion_update: DispersionUpdate,
    /// Keep `w ≡ 0` (and skip `φ_s`, `σ²`) in spatial models.
    pub freeze_spatial: bool,
    /// Starting state; `None` uses [`ModelState::initial`].
    pub initial: Option<ModelState>,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            iters: 10_000,
            burnin: 5_000,
            thin: 10,
            seed: 0,
            stream: 0,
            tau_mean: None,
            tau_disp: None,
            step_xi: 0.02,
            step_phis: 0.5,
            target_mala: 0.574,
            target_rw: 0.33,
            refresh_interval: 50,
            dispersion_update: DispersionUpdate::default(),
            freeze_spatial: false,
            initial: None,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 || self.iters <= self.burnin {
            return Err(Error::Config(format!(
                "need thin >= 1 and iters > burnin (iters={}, burnin={}, thin={})",
                self.iters, self.burnin, self.thin
            )));
        }
        if self.refresh_interval == 0 {
            return Err(Error::Config("refresh_interval must be >= 1".into()));
        }
        for (name, v) in [
            ("step_xi", self.step_xi),
            ("step_phis", self.step_phis),
            ("tau_mean", self.tau_mean.unwrap_or(1.0)),
            ("tau_disp", self.tau_disp.unwrap_or(1.0)),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("target_mala", self.target_mala), ("target_rw", self.target_rw)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }

    /// Number of stored draws, `⌊(iters − burnin)/thin⌋`.
    pub fn kept(&self) -> usize {
        (self.iters - self.burnin) / self.thin
    }

    fn keeps(&self, i: usize) -> bool {
        i >= self.burnin && (i - self.burnin + 1) % self.thin == 0
    }
}

/// Random-number generator for one chain.
pub fn chain_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stored draws and sampler diagnostics of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub model: ModelId,
    pub param_names: Vec<String>,
    /// Kept iterations × parameters.
    pub draws: Matrix,
    /// Joint log-posterior at each kept iteration.
    pub log_posterior: Vec<f64>,
    pub acceptance: BlockAcceptance,
    pub steps: StepState,
    pub seed: u64,
    pub stream: u64,
    /// State after the last iteration.
    pub final_state: ModelState,
    /// Iterations in which some linear predictor hit the clamp.
    pub clamp_events: usize,
}

impl ChainOutput {
    pub fn kept(&self) -> usize {
        self.draws.rows()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.param_names.iter().position(|n| n == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        self.column_index(name).map(|j| self.draws.column(j))
    }

    /// Columns whose names start with `prefix` (e.g. `"beta["`), as a
    /// kept × count matrix.
    pub fn family(&self, prefix: &str) -> Matrix {
        let cols: Vec<usize> = (0..self.param_names.len())
            .filter(|&j| self.param_names[j].starts_with(prefix))
            .collect();
        Matrix::from_fn(self.kept(), cols.len(), |i, j| self.draws[(i, cols[j])])
    }
}

/// Column names of the stored draws, stable for a given model and data.
pub fn parameter_names(model: ModelId, obs: &ObservationSet) -> Vec<String> {
    let mut names: Vec<String> = obs.x_names().iter().map(|n| format!("beta[{n}]")).collect();
    names.extend(obs.z_names().iter().map(|n| format!("gamma[{n}]")));
    names.push("xi".into());
    if model.is_spatial() {
        names.extend((0..obs.n_sites()).map(|i| format!("w[{i}]")));
        names.push("sigma2".into());
        names.push("phi_s".into());
    }
    if model.has_selection() {
        names.push("alpha_beta".into());
        names.push("alpha_gamma".into());
    }
    names
}

fn state_row(model: ModelId, state: &ModelState) -> Vec<f64> {
    let mut row = state.beta.clone();
    row.extend_from_slice(&state.gamma);
    row.push(state.xi.value());
    if model.is_spatial() {
        row.extend_from_slice(&state.w);
        row.push(state.sigma2);
        row.push(state.phi_s);
    }
    if model.has_selection() {
        row.push(state.select_beta.as_ref().map_or(f64::NAN, |l| l.alpha));
        row.push(state.select_gamma.as_ref().map_or(f64::NAN, |l| l.alpha));
    }
    row
}

/// Per-draw hierarchical centering of the spatial effects:
/// `β₀ = mean(w)` and `w − β₀`.
pub fn hierarchical_center(w_draws: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if w_draws.rows() == 0 {
        return Err(Error::InsufficientDraws { needed: 1, found: 0 });
    }
    let l = w_draws.cols();
    let mut centered = w_draws.clone();
    let beta0 = (0..w_draws.rows())
        .map(|i| {
            let row = centered.row_mut(i);
            let m = if l == 0 { 0.0 } else { row.iter().sum::<f64>() / l as f64 };
            row.iter_mut().for_each(|v| *v -= m);
            m
        })
        .collect();
    Ok((beta0, centered))
}

/// Runs one chain seeded from `config.seed` and `config.stream`.
pub fn run_chain(
    model: ModelId,
    obs: &ObservationSet,
    domain: Option<&SpatialDomain>,
    hyper: &Hyperparameters,
    config: &McmcConfig,
) -> Result<ChainOutput> {
    let mut rng = chain_rng(config.seed, config.stream);
    run_chain_with_rng(model, obs, domain, hyper, config, &mut rng)
}

/// Runs one chain with a caller-supplied generator.
pub fn run_chain_with_rng<R: Rng + ?Sized>(
    model: ModelId,
    obs: &ObservationSet,
    domain: Option<&SpatialDomain>,
    hyper: &Hyperparameters,
    config: &McmcConfig,
    rng: &mut R,
) -> Result<ChainOutput> {
    hyper.validate()?;
    config.validate()?;
    match (model.is_spatial(), domain) {
        (true, None) => return Err(Error::Config(format!("{model} needs a spatial domain"))),
        (false, Some(_)) => return Err(Error::Config(format!("{model} takes no spatial domain"))),
        (true, Some(d)) => check_len("spatial sites", obs.n_sites(), d.n_sites())?,
        _ => {}
    }
    let mut state = match &config.initial {
        Some(s) => s.clone(),
        None => ModelState::initial(model, obs, hyper)?,
    };
    state.validate(obs, model)?;
    let spatial = model.is_spatial() && !config.freeze_spatial;
    if model.is_spatial() && config.freeze_spatial {
        state.w.iter_mut().for_each(|v| *v = 0.0);
    }
    let mut chol_r = match domain {
        Some(d) if model.is_spatial() => Some(phis_kernel(state.phi_s, d, hyper).ok_or_else(|| {
            Error::Config(format!("initial phi_s = {} is outside its prior support", state.phi_s))
        })?),
        _ => None,
    };

    let p = obs.p();
    let dim_mean = p + if spatial { obs.n_sites() } else { 0 };
    let dim_disp = obs.q();
    let default_tau = |d: usize| 1.65 * libm::pow(d.max(1) as f64, -1.0 / 6.0);
    let mut steps = StepState {
        tau_mean: config.tau_mean.unwrap_or_else(|| default_tau(dim_mean)),
        tau_disp: config.tau_disp.unwrap_or_else(|| default_tau(dim_disp)),
        step_xi: config.step_xi,
        step_phis: config.step_phis,
        window_mean: AcceptWindow::default(),
        window_disp: AcceptWindow::default(),
        window_xi: AcceptWindow::default(),
        window_phis: AcceptWindow::default(),
    };
    let mut pre_mean = Preconditioner::identity(dim_mean);
    let mut pre_disp = Preconditioner::identity(dim_disp);
    let (mut acc_mean, mut acc_disp, mut acc_xi, mut acc_phis) =
        (Counter::default(), Counter::default(), Counter::default(), Counter::default());
    // Preconditioners settle over the first 80% of burn-in; the scales are
    // then averaged on the log scale over the rest and frozen at that mean.
    let settle_end = config.burnin - config.burnin / 5;
    let mut log_scale_sum = [0.0f64; 4];
    let mut averaged = 0usize;

    let kept = config.kept();
    let names = parameter_names(model, obs);
    let mut draws = Matrix::zeros(0, names.len());
    let mut log_posterior = Vec::with_capacity(kept);
    let mut clamp_events = 0usize;
    let zeros_w = vec![0.0; if model.is_spatial() { obs.n_sites() } else { 0 }];
    let disp_mode = config.dispersion_update;

    for i in 0..config.iters {
        let adapting = i < config.burnin;
        let refresh = i < settle_end && i % config.refresh_interval == 0;
        let mut clamped = false;

        // (1) mean block
        {
            let pred = linear_predictors(&state, obs, model)?;
            let process = match (&chol_r, spatial) {
                (Some(c), true) => Some(ProcessPrior {
                    chol: c,
                    precision: 1.0 / state.sigma2,
                }),
                _ => None,
            };
            let fixed_w = if model.is_spatial() && !spatial { Some(&zeros_w[..]) } else { None };
            let target = MeanTarget::new(
                obs,
                &pred.phi,
                state.xi.value(),
                beta_prior_precision(model, &state, hyper),
                process,
                fixed_w,
            );
            let mut x = state.beta.clone();
            if spatial {
                x.extend_from_slice(&state.w);
            }
            if refresh {
                pre_mean = Preconditioner::from_information(&target.fisher_information(&x));
            }
            let current = LangevinPoint::evaluate(x, |v| target.log_density_and_gradient(v));
            if !current.log_density.is_finite() {
                return Err(Error::NonFinite(format!("mean block at iteration {i}")));
            }
            let (next, acc) = mala_step(&current, |v| target.log_density_and_gradient(v), &pre_mean, steps.tau_mean, rng);
            state.beta.copy_from_slice(&next.x[..p]);
            if spatial {
                state.w.copy_from_slice(&next.x[p..]);
            }
            record(acc, adapting, &mut steps.window_mean, &mut acc_mean);
            if adapting {
                steps.tau_mean = adapt_scale(steps.tau_mean, acc as u8 as f64, config.target_mala, i + 1);
            }
            clamped |= pred.clamped || target.clamped();
        }

        // (2) dispersion block
        let mu: Vec<f64> = mean_eta(obs, &state.beta, state.spatial_effects(model))
            .into_iter()
            .map(|e| libm::exp(e.clamp(-ETA_CLAMP, ETA_CLAMP)))
            .collect();
        {
            let target = DispersionTarget::new(
                obs,
                &mu,
                state.xi.value(),
                gamma_prior_precision(model, &state, hyper),
                disp_mode.likelihood(),
            );
            if refresh {
                pre_disp = Preconditioner::from_information(&target.fisher_information());
            }
            let eval = |v: &[f64]| match disp_mode {
                DispersionUpdate::SaddlepointMala | DispersionUpdate::SeriesMala => {
                    target.log_density_and_gradient(v)
                }
                DispersionUpdate::SeriesMalaNumeric => {
                    (target.log_density(v), target.gradient(v, GradientMode::Numeric))
                }
                DispersionUpdate::RandomWalk => (target.log_density(v), vec![0.0; v.len()]),
            };
            let current = LangevinPoint::evaluate(state.gamma.clone(), eval);
            if !current.log_density.is_finite() {
                return Err(Error::NonFinite(format!("dispersion block at iteration {i}")));
            }
            let (next, acc) = mala_step(&current, eval, &pre_disp, steps.tau_disp, rng);
            state.gamma = next.x;
            record(acc, adapting, &mut steps.window_disp, &mut acc_disp);
            let target_rate = if disp_mode == DispersionUpdate::RandomWalk {
                config.target_rw
            } else {
                config.target_mala
            };
            if adapting {
                steps.tau_disp = adapt_scale(steps.tau_disp, acc as u8 as f64, target_rate, i + 1);
            }
            clamped |= target.clamped();
        }

        // (3) index parameter
        let xi_target = XiTarget::new(obs, mu, disp_eta(obs, &state.gamma, 2.0));
        let current_xi = xi_target.log_density(state.xi.value(), hyper);
        if !current_xi.is_finite() {
            return Err(Error::NonFinite(format!("likelihood at iteration {i}")));
        }
        let support = (hyper.a_xi.max(1.0), hyper.b_xi.min(2.0));
        let (xi, log_lik, acc) = rw_step(
            state.xi.value(),
            current_xi,
            |v| xi_target.log_density(v, hyper),
            steps.step_xi,
            support,
            rng,
        );
        state.xi = TweedieIndex::new(xi)?;
        record(acc, adapting, &mut steps.window_xi, &mut acc_xi);
        if adapting {
            steps.step_xi = adapt_scale(steps.step_xi, acc as u8 as f64, config.target_rw, i + 1);
        }

        // (4) spatial decay and (5) process variance
        if spatial {
            let dom = domain.expect("checked above");
            let chol = chol_r.as_ref().expect("spatial kernel");
            let current = phis_log_density(chol, &state.w, state.sigma2);
            let mut cached: Option<(f64, Cholesky)> = None;
            let (phi_s, _, acc) = rw_step(
                state.phi_s,
                current,
                |v| match phis_kernel(v, dom, hyper) {
                    Some(c) => {
                        let lp = phis_log_density(&c, &state.w, state.sigma2);
                        cached = Some((v, c));
                        lp
                    }
                    None => f64::NEG_INFINITY,
                },
                steps.step_phis,
                hyper.phis_support(),
                rng,
            );
            if acc {
                let (v, c) = cached.take().expect("accepted proposal was evaluated");
                debug_assert_eq!(v, phi_s);
                chol_r = Some(c);
                state.phi_s = phi_s;
            }
            record(acc, adapting, &mut steps.window_phis, &mut acc_phis);
            if adapting {
                steps.step_phis = adapt_scale(steps.step_phis, acc as u8 as f64, config.target_rw, i + 1);
            }
            let chol = chol_r.as_ref().expect("spatial kernel");
            state.sigma2 = gibbs_sigma2_process(&state.w, chol, hyper.a_sigma, hyper.b_sigma, rng);
        }

        // (6) selection latents
        if model.has_selection() {
            if let Some(lat) = state.select_beta.as_mut() {
                gibbs_spike_slab(&state.beta, lat, hyper.a_sigma_beta, hyper.b_sigma_beta, rng)?;
            }
            if let Some(lat) = state.select_gamma.as_mut() {
                gibbs_spike_slab(&state.gamma, lat, hyper.a_sigma_gamma, hyper.b_sigma_gamma, rng)?;
            }
        }

        if adapting && i >= settle_end {
            for (sum, v) in log_scale_sum.iter_mut().zip(steps.scales()) {
                *sum += libm::log(v);
            }
            averaged += 1;
            if i + 1 == config.burnin {
                let mean = log_scale_sum.map(|s| libm::exp(s / averaged as f64));
                steps.set_scales(mean);
            }
        }

        clamp_events += clamped as usize;
        if config.keeps(i) {
            let lp = log_lik + log_prior(&state, chol_r.as_ref(), model, hyper)?;
            if !lp.is_finite() {
                return Err(Error::NonFinite(format!("joint log-posterior at iteration {i}")));
            }
            draws.push_row(&state_row(model, &state))?;
            log_posterior.push(lp);
        }
    }
    if clamp_events > 0 {
        log::warn!("{clamp_events} iterations hit the linear-predictor clamp");
    }

    Ok(ChainOutput {
        model,
        param_names: names,
        draws,
        log_posterior,
        acceptance: BlockAcceptance {
            mean: acc_mean.rate(),
            dispersion: acc_disp.rate(),
            xi: acc_xi.rate(),
            phi_s: spatial.then(|| acc_phis.rate()),
        },
        steps,
        seed: config.seed,
        stream: config.stream,
        final_state: state,
        clamp_events,
    })
}

fn record(accepted: bool, adapting: bool, window: &mut AcceptWindow, kept: &mut Counter) {
    window.push(accepted);
    if !adapting {
        kept.push(accepted);
    }
}
