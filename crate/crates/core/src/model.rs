//! Link structure, log-posterior kernels, gradients and Fisher preconditioners
//! for the four model variants.
//!
//! Both linear predictors use a log link with exposure offsets:
//!
//! ```text
//! log μ_k = s·log t_k        + x_kᵀβ + w_{loc(k)}     (w only for M3/M4)
//! log φ_k = s·(2-ξ)·log t_k  + z_kᵀγ
//! ```
//!
//! where `s = -1` by default ([`OffsetSign::Negative`]). The mean-block kernel
//! weights the unit deviance by `1/(2φ)`, which is the exponent of the CP-g
//! density. Dispersion-block kernels come in a saddlepoint form (with the
//! `½·log φ·I(y>0)` term) and an exact series form.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::Cell;
use core::f64::consts::PI;
use core::fmt;
use core::str::FromStr;

use crate::error::{check_len, domain, Error, Result};
use crate::linalg::{axpy, dot, Cholesky, Matrix};
use crate::selection::SpikeSlabLatents;
use crate::spatial::{CholState, SpatialDomain};
use crate::special::ln_gamma;
use crate::tweedie::{self, cumulant, unit_deviance, DensityMethod, TweedieIndex};

/// Linear predictors are clamped to `±ETA_CLAMP` before exponentiation.
pub const ETA_CLAMP: f64 = 700.0;

/// The four model variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelId {
    M1,
    M2,
    M3,
    M4,
}

impl ModelId {
    pub const ALL: [ModelId; 4] = [ModelId::M1, ModelId::M2, ModelId::M3, ModelId::M4];

    /// Whether the mean model carries the spatial effect `w`.
    pub fn is_spatial(self) -> bool {
        matches!(self, ModelId::M3 | ModelId::M4)
    }

    /// Whether the spike-and-slab selection prior is used.
    pub fn has_selection(self) -> bool {
        matches!(self, ModelId::M2 | ModelId::M4)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelId::M1 => "M1",
            ModelId::M2 => "M2",
            ModelId::M3 => "M3",
            ModelId::M4 => "M4",
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "M1" => Ok(ModelId::M1),
            "M2" => Ok(ModelId::M2),
            "M3" => Ok(ModelId::M3),
            "M4" => Ok(ModelId::M4),
            other => Err(Error::Config(format!("unknown model id {other:?}"))),
        }
    }
}

/// Sign `s` of the exposure offsets `s·log t` and `s·(2-ξ)·log t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OffsetSign {
    /// `-log t` and `-(2-ξ) log t`.
    #[default]
    Negative,
    /// `+log t` and `+(2-ξ) log t`, i.e. `y ~ Tw(tμ, t^{2-ξ}φ, ξ)`.
    Positive,
}

impl OffsetSign {
    #[inline]
    pub fn factor(self) -> f64 {
        match self {
            OffsetSign::Negative => -1.0,
            OffsetSign::Positive => 1.0,
        }
    }
}

/// Responses, exposures, site membership and the two design matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    y: Vec<f64>,
    exposure: Vec<f64>,
    log_exposure: Vec<f64>,
    loc: Vec<usize>,
    n_sites: usize,
    x: Matrix,
    z: Matrix,
    x_names: Vec<String>,
    z_names: Vec<String>,
    offset_sign: OffsetSign,
}

impl ObservationSet {
    /// `loc[k]` is the zero-based site index of row `k`.
    pub fn new(
        y: Vec<f64>,
        exposure: Vec<f64>,
        loc: Vec<usize>,
        n_sites: usize,
        x: Matrix,
        z: Matrix,
    ) -> Result<Self> {
        let n = y.len();
        check_len("exposure", n, exposure.len())?;
        check_len("location", n, loc.len())?;
        check_len("mean design rows", n, x.rows())?;
        check_len("dispersion design rows", n, z.rows())?;
        for (k, &v) in y.iter().enumerate() {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(domain(format!("response {k} must be finite and >= 0, got {v}")));
            }
        }
        for (k, &t) in exposure.iter().enumerate() {
            if !(t > 0.0) || !t.is_finite() {
                return Err(domain(format!("exposure {k} must be positive, got {t}")));
            }
        }
        for (k, &l) in loc.iter().enumerate() {
            if l >= n_sites {
                return Err(domain(format!(
                    "row {k} refers to site {l}, but only {n_sites} sites exist"
                )));
            }
        }
        if x.as_slice().iter().chain(z.as_slice()).any(|v| !v.is_finite()) {
            return Err(domain("design matrices must be finite"));
        }
        let log_exposure = exposure.iter().map(|&t| libm::log(t)).collect();
        let x_names = (0..x.cols()).map(|j| format!("x_{j}")).collect();
        let z_names = (0..z.cols()).map(|j| format!("z_{j}")).collect();
        Ok(ObservationSet {
            y,
            exposure,
            log_exposure,
            loc,
            n_sites,
            x,
            z,
            x_names,
            z_names,
            offset_sign: OffsetSign::Negative,
        })
    }

    /// Observations without site structure (all rows at a single site).
    pub fn non_spatial(y: Vec<f64>, exposure: Vec<f64>, x: Matrix, z: Matrix) -> Result<Self> {
        let n = y.len();
        Self::new(y, exposure, vec![0; n], 1, x, z)
    }

    pub fn with_names(mut self, x_names: Vec<String>, z_names: Vec<String>) -> Result<Self> {
        check_len("mean covariate names", self.x.cols(), x_names.len())?;
        check_len("dispersion covariate names", self.z.cols(), z_names.len())?;
        self.x_names = x_names;
        self.z_names = z_names;
        Ok(self)
    }

    pub fn with_offset_sign(mut self, sign: OffsetSign) -> Self {
        self.offset_sign = sign;
        self
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.cols()
    }

    pub fn q(&self) -> usize {
        self.z.cols()
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn exposure(&self) -> &[f64] {
        &self.exposure
    }

    pub fn log_exposure(&self) -> &[f64] {
        &self.log_exposure
    }

    pub fn loc(&self) -> &[usize] {
        &self.loc
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn z(&self) -> &Matrix {
        &self.z
    }

    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }

    pub fn z_names(&self) -> &[String] {
        &self.z_names
    }

    pub fn offset_sign(&self) -> OffsetSign {
        self.offset_sign
    }

    /// Index of the first all-ones column of `X`, if any.
    pub fn mean_intercept(&self) -> Option<usize> {
        constant_one_column(&self.x)
    }

    /// Index of the first all-ones column of `Z`, if any.
    pub fn dispersion_intercept(&self) -> Option<usize> {
        constant_one_column(&self.z)
    }

    /// Copy with column `col` removed from `X`.
    pub fn drop_mean_column(&self, col: usize) -> Result<Self> {
        if col >= self.p() {
            return Err(domain(format!("no mean column {col}")));
        }
        let x = Matrix::from_fn(self.n(), self.p() - 1, |i, j| {
            self.x[(i, if j < col { j } else { j + 1 })]
        });
        let mut x_names = self.x_names.clone();
        x_names.remove(col);
        Ok(ObservationSet {
            x,
            x_names,
            ..self.clone()
        })
    }

    /// Fraction of exact zeros in the response.
    pub fn zero_fraction(&self) -> f64 {
        if self.y.is_empty() {
            return 0.0;
        }
        self.y.iter().filter(|&&v| v == 0.0).count() as f64 / self.n() as f64
    }

    /// Rows reordered by `perm` (used by tests of exchangeability).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_len("permutation", self.n(), perm.len())?;
        let pick = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let x = Matrix::from_fn(self.n(), self.p(), |i, j| self.x[(perm[i], j)]);
        let z = Matrix::from_fn(self.n(), self.q(), |i, j| self.z[(perm[i], j)]);
        Ok(ObservationSet {
            y: pick(&self.y),
            exposure: pick(&self.exposure),
            log_exposure: pick(&self.log_exposure),
            loc: perm.iter().map(|&i| self.loc[i]).collect(),
            x,
            z,
            ..self.clone()
        })
    }
}

fn constant_one_column(m: &Matrix) -> Option<usize> {
    if m.rows() == 0 {
        return None;
    }
    (0..m.cols()).find(|&j| (0..m.rows()).all(|i| m[(i, j)] == 1.0))
}

/// Prior hyperparameters. Defaults follow the synthetic-experiment settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    pub a_xi: f64,
    pub b_xi: f64,
    /// Fixed prior variance of β under M1/M3.
    pub sigma2_beta_fixed: f64,
    /// Fixed prior variance of γ under M1/M3.
    pub sigma2_gamma_fixed: f64,
    /// Gamma(shape, rate) prior on the process precision σ⁻².
    pub a_sigma: f64,
    pub b_sigma: f64,
    pub a_phis: f64,
    pub b_phis: f64,
    /// Matérn smoothness, held fixed.
    pub nu: f64,
    /// Spike value of the selection indicators.
    pub nu0: f64,
    pub a_sigma_beta: f64,
    pub b_sigma_beta: f64,
    pub a_sigma_gamma: f64,
    pub b_sigma_gamma: f64,
    pub fdr_alpha: f64,
    pub fdr_c: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            a_xi: 1.0,
            b_xi: 2.0,
            sigma2_beta_fixed: 1e6,
            sigma2_gamma_fixed: 1e6,
            a_sigma: 2.0,
            b_sigma: 1.0,
            a_phis: 0.0,
            b_phis: 30.0,
            nu: 0.5,
            nu0: 5e-4,
            a_sigma_beta: 2.0,
            b_sigma_beta: 1.0,
            a_sigma_gamma: 2.0,
            b_sigma_gamma: 1.0,
            fdr_alpha: 0.05,
            fdr_c: 0.05,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.a_xi >= 1.0 && self.b_xi <= 2.0 && self.a_xi < self.b_xi) {
            return bad(format!(
                "xi bounds must satisfy 1 <= a_xi < b_xi <= 2 (got {}, {})",
                self.a_xi, self.b_xi
            ));
        }
        if !(self.a_phis >= 0.0 && self.a_phis < self.b_phis) {
            return bad(format!(
                "phi_s bounds must satisfy 0 <= a_phis < b_phis (got {}, {})",
                self.a_phis, self.b_phis
            ));
        }
        if !(self.nu0 > 0.0 && self.nu0 < 1.0) {
            return bad(format!("nu0 must lie in (0, 1), got {}", self.nu0));
        }
        for (name, v) in [
            ("sigma2_beta_fixed", self.sigma2_beta_fixed),
            ("sigma2_gamma_fixed", self.sigma2_gamma_fixed),
            ("a_sigma", self.a_sigma),
            ("b_sigma", self.b_sigma),
            ("nu", self.nu),
            ("a_sigma_beta", self.a_sigma_beta),
            ("b_sigma_beta", self.b_sigma_beta),
            ("a_sigma_gamma", self.a_sigma_gamma),
            ("b_sigma_gamma", self.b_sigma_gamma),
            ("fdr_c", self.fdr_c),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.fdr_alpha > 0.0 && self.fdr_alpha < 1.0) {
            return bad(format!("fdr_alpha must lie in (0, 1), got {}", self.fdr_alpha));
        }
        Ok(())
    }

    pub(crate) fn xi_support(&self) -> (f64, f64) {
        (self.a_xi, self.b_xi)
    }

    pub(crate) fn phis_support(&self) -> (f64, f64) {
        (self.a_phis, self.b_phis)
    }
}

/// Every sampled quantity of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Spatial effects; empty for M1/M2.
    pub w: Vec<f64>,
    pub xi: TweedieIndex,
    /// Process variance σ².
    pub sigma2: f64,
    /// Matérn decay φ_s.
    pub phi_s: f64,
    pub select_beta: Option<SpikeSlabLatents>,
    pub select_gamma: Option<SpikeSlabLatents>,
}

impl ModelState {
    /// A neutral starting point: zero coefficients (intercepts at the log
    /// mean response), `ξ` mid-support, unit process variance.
    pub fn initial(model: ModelId, obs: &ObservationSet, hyper: &Hyperparameters) -> Result<Self> {
        let mean_y = if obs.n() == 0 {
            1.0
        } else {
            let s: f64 = obs.y().iter().zip(obs.exposure()).map(|(y, t)| y / t).sum();
            (s / obs.n() as f64).max(1e-3)
        };
        let mut beta = vec![0.0; obs.p()];
        let mut w = Vec::new();
        if model.is_spatial() {
            w = vec![0.0; obs.n_sites()];
            match obs.mean_intercept() {
                Some(j) => beta[j] = libm::log(mean_y),
                None => w.iter_mut().for_each(|v| *v = libm::log(mean_y)),
            }
        } else if let Some(j) = obs.mean_intercept() {
            beta[j] = libm::log(mean_y);
        }
        let xi = TweedieIndex::new(0.5 * (hyper.a_xi + hyper.b_xi))?;
        let (lo, hi) = hyper.phis_support();
        let phi_s = if 3.0 > lo && 3.0 < hi { 3.0 } else { 0.5 * (lo + hi) };
        let (select_beta, select_gamma) = if model.has_selection() {
            (
                Some(SpikeSlabLatents::slab(obs.p(), hyper.nu0)),
                Some(SpikeSlabLatents::slab(obs.q(), hyper.nu0)),
            )
        } else {
            (None, None)
        };
        Ok(ModelState {
            beta,
            gamma: vec![0.0; obs.q()],
            w,
            xi,
            sigma2: 1.0,
            phi_s,
            select_beta,
            select_gamma,
        })
    }

    /// Checks dimensions and positivity against the data and model.
    pub fn validate(&self, obs: &ObservationSet, model: ModelId) -> Result<()> {
        check_len("beta", obs.p(), self.beta.len())?;
        check_len("gamma", obs.q(), self.gamma.len())?;
        if model.is_spatial() {
            check_len("w", obs.n_sites(), self.w.len())?;
        }
        if !(self.sigma2 > 0.0) || !(self.phi_s > 0.0) {
            return Err(domain("sigma2 and phi_s must be positive"));
        }
        if model.has_selection() {
            match (&self.select_beta, &self.select_gamma) {
                (Some(b), Some(g)) => {
                    check_len("beta selection latents", obs.p(), b.len())?;
                    check_len("gamma selection latents", obs.q(), g.len())?;
                }
                _ => return Err(Error::Config(format!("{model} needs selection latents"))),
            }
        }
        Ok(())
    }

    /// Spatial effects as used by the mean model (`None` for M1/M2).
    pub(crate) fn spatial_effects(&self, model: ModelId) -> Option<&[f64]> {
        if model.is_spatial() && !self.w.is_empty() {
            Some(&self.w)
        } else {
            None
        }
    }
}

/// Means and dispersions for every observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictors {
    pub mu: Vec<f64>,
    pub phi: Vec<f64>,
    /// Whether any linear predictor hit the `±700` clamp.
    pub clamped: bool,
}

#[inline]
fn clamp_eta(eta: f64, clamped: &Cell<bool>) -> f64 {
    if eta > ETA_CLAMP {
        clamped.set(true);
        ETA_CLAMP
    } else if eta < -ETA_CLAMP {
        clamped.set(true);
        -ETA_CLAMP
    } else {
        eta
    }
}

/// `s·log t + Xβ (+ w_loc)`, unclamped.
pub(crate) fn mean_eta(obs: &ObservationSet, beta: &[f64], w: Option<&[f64]>) -> Vec<f64> {
    let s = obs.offset_sign.factor();
    let mut eta: Vec<f64> = (0..obs.n())
        .map(|k| s * obs.log_exposure[k] + dot(obs.x.row(k), beta))
        .collect();
    if let Some(w) = w {
        for (e, &l) in eta.iter_mut().zip(&obs.loc) {
            *e += w[l];
        }
    }
    eta
}

/// `s·(2-ξ)·log t + Zγ`, unclamped.
pub(crate) fn disp_eta(obs: &ObservationSet, gamma: &[f64], xi: f64) -> Vec<f64> {
    let s = obs.offset_sign.factor() * (2.0 - xi);
    (0..obs.n())
        .map(|k| s * obs.log_exposure[k] + dot(obs.z.row(k), gamma))
        .collect()
}

/// Means and dispersions at the current state.
pub fn linear_predictors(state: &ModelState, obs: &ObservationSet, model: ModelId) -> Result<Predictors> {
    check_len("beta", obs.p(), state.beta.len())?;
    check_len("gamma", obs.q(), state.gamma.len())?;
    let w = state.spatial_effects(model);
    if let Some(w) = w {
        check_len("w", obs.n_sites(), w.len())?;
    }
    let clamped = Cell::new(false);
    let mu = mean_eta(obs, &state.beta, w)
        .into_iter()
        .map(|e| libm::exp(clamp_eta(e, &clamped)))
        .collect();
    let phi = disp_eta(obs, &state.gamma, state.xi.value())
        .into_iter()
        .map(|e| libm::exp(clamp_eta(e, &clamped)))
        .collect();
    if clamped.get() {
        log::warn!("linear predictor clamped to ±{ETA_CLAMP}");
    }
    Ok(Predictors {
        mu,
        phi,
        clamped: clamped.get(),
    })
}

/// Prior precisions of β: `1/σ²_β,fixed` (M1/M3) or `1/(ζ_u σ²_u)` (M2/M4).
pub fn beta_prior_precision(model: ModelId, state: &ModelState, hyper: &Hyperparameters) -> Vec<f64> {
    match (&state.select_beta, model.has_selection()) {
        (Some(lat), true) => lat.prior_precisions(),
        _ => vec![1.0 / hyper.sigma2_beta_fixed; state.beta.len()],
    }
}

/// Prior precisions of γ, analogous to [`beta_prior_precision`].
pub fn gamma_prior_precision(model: ModelId, state: &ModelState, hyper: &Hyperparameters) -> Vec<f64> {
    match (&state.select_gamma, model.has_selection()) {
        (Some(lat), true) => lat.prior_precisions(),
        _ => vec![1.0 / hyper.sigma2_gamma_fixed; state.gamma.len()],
    }
}

/// Gaussian-process prior on `w` as seen by the mean block.
#[derive(Debug, Clone, Copy)]
pub struct ProcessPrior<'a> {
    /// Factor of the correlation matrix `R(φ_s)`.
    pub chol: &'a CholState,
    /// `σ⁻²`.
    pub precision: f64,
}

/// Conditional log-posterior of the mean block `(β, w)` or `β` alone.
///
/// With `process` present the block vector is `(β, w)`; otherwise it is `β`
/// and `fixed_w` (if any) is added to the linear predictor as a constant.
#[derive(Debug)]
pub struct MeanTarget<'a> {
    obs: &'a ObservationSet,
    xi: f64,
    inv_phi: Vec<f64>,
    y_pow: Vec<f64>,
    prior_precision: Vec<f64>,
    process: Option<ProcessPrior<'a>>,
    fixed_w: Option<&'a [f64]>,
    clamped: Cell<bool>,
}

impl<'a> MeanTarget<'a> {
    pub fn new(
        obs: &'a ObservationSet,
        phi: &[f64],
        xi: f64,
        prior_precision: Vec<f64>,
        process: Option<ProcessPrior<'a>>,
        fixed_w: Option<&'a [f64]>,
    ) -> Self {
        let y_pow = obs
            .y
            .iter()
            .map(|&y| if y > 0.0 { libm::pow(y, 2.0 - xi) } else { 0.0 })
            .collect();
        MeanTarget {
            obs,
            xi,
            inv_phi: phi.iter().map(|p| 1.0 / p).collect(),
            y_pow,
            prior_precision,
            process,
            fixed_w,
            clamped: Cell::new(false),
        }
    }

    pub fn dim(&self) -> usize {
        self.obs.p() + self.process.map_or(0, |_| self.obs.n_sites())
    }

    pub fn clamped(&self) -> bool {
        self.clamped.get()
    }

    fn split<'b>(&self, bw: &'b [f64]) -> (&'b [f64], Option<&'b [f64]>) {
        let p = self.obs.p();
        let (beta, rest) = bw.split_at(p);
        (beta, if self.process.is_some() { Some(rest) } else { None })
    }

    /// `(μ^{1-ξ}, μ^{2-ξ})` per observation.
    fn mean_powers(&self, bw: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (beta, w) = self.split(bw);
        let w = w.or(self.fixed_w);
        let eta = mean_eta(self.obs, beta, w);
        let mut m1 = Vec::with_capacity(eta.len());
        let mut m2 = Vec::with_capacity(eta.len());
        for e in eta {
            let e = clamp_eta(e, &self.clamped);
            let a = libm::exp((1.0 - self.xi) * e);
            m1.push(a);
            m2.push(a * libm::exp(e));
        }
        (m1, m2)
    }

    fn log_prior(&self, bw: &[f64]) -> f64 {
        let (beta, w) = self.split(bw);
        let mut lp = -0.5
            * beta
                .iter()
                .zip(&self.prior_precision)
                .map(|(b, p)| p * b * b)
                .sum::<f64>();
        if let (Some(w), Some(pr)) = (w, self.process) {
            lp -= 0.5 * pr.precision * pr.chol.quad_form(w);
        }
        lp
    }

    /// `-Σ d_k/(2φ_k) - ½ Σ β²/λ - (σ⁻²/2) wᵀR⁻¹w`.
    pub fn log_density(&self, bw: &[f64]) -> f64 {
        let (m1, m2) = self.mean_powers(bw);
        let (a, b) = (1.0 - self.xi, 2.0 - self.xi);
        let mut ll = 0.0;
        for k in 0..m1.len() {
            let y = self.obs.y[k];
            let yp = self.y_pow[k];
            let d = 2.0 * ((yp - y * m1[k]) / a - (yp - m2[k]) / b);
            ll -= d * 0.5 * self.inv_phi[k];
        }
        ll + self.log_prior(bw)
    }

    /// Gradient `[Xᵀu - Λ⁻¹β ; Fᵀu - σ⁻²R⁻¹w]` with `u_k = (y_k-μ_k)μ_k^{1-ξ}/φ_k`.
    pub fn gradient(&self, bw: &[f64]) -> Vec<f64> {
        self.log_density_and_gradient(bw).1
    }

    pub fn log_density_and_gradient(&self, bw: &[f64]) -> (f64, Vec<f64>) {
        let (m1, m2) = self.mean_powers(bw);
        let (a, b) = (1.0 - self.xi, 2.0 - self.xi);
        let n = m1.len();
        let mut ll = 0.0;
        let mut u = Vec::with_capacity(n);
        for k in 0..n {
            let y = self.obs.y[k];
            let yp = self.y_pow[k];
            let d = 2.0 * ((yp - y * m1[k]) / a - (yp - m2[k]) / b);
            ll -= d * 0.5 * self.inv_phi[k];
            // (y - μ) μ^{1-ξ} = y μ^{1-ξ} - μ^{2-ξ}
            u.push((y * m1[k] - m2[k]) * self.inv_phi[k]);
        }
        let p = self.obs.p();
        let mut grad = vec![0.0; self.dim()];
        for k in 0..n {
            axpy(u[k], self.obs.x.row(k), &mut grad[..p]);
        }
        let (beta, w) = self.split(bw);
        for j in 0..p {
            grad[j] -= self.prior_precision[j] * beta[j];
        }
        if let (Some(w), Some(pr)) = (w, self.process) {
            for k in 0..n {
                grad[p + self.obs.loc[k]] += u[k];
            }
            let rinv_w = pr.chol.solve(w);
            for (g, r) in grad[p..].iter_mut().zip(rinv_w) {
                *g -= pr.precision * r;
            }
        }
        (ll + self.log_prior(bw), grad)
    }

    /// Expected information `E[-∇² log π]` at `bw`:
    /// `[XᵀWX + P_β, XᵀWF ; FᵀWX, FᵀWF + σ⁻²R⁻¹]`, `W = diag(μ^{2-ξ}/φ)`.
    pub fn fisher_information(&self, bw: &[f64]) -> Matrix {
        let (_, m2) = self.mean_powers(bw);
        let p = self.obs.p();
        let dim = self.dim();
        let mut info = Matrix::zeros(dim, dim);
        for k in 0..m2.len() {
            let wk = m2[k] * self.inv_phi[k];
            let xk = self.obs.x.row(k);
            for i in 0..p {
                let wxi = wk * xk[i];
                if wxi == 0.0 {
                    continue;
                }
                for j in 0..=i {
                    info[(i, j)] += wxi * xk[j];
                }
            }
            if self.process.is_some() {
                let s = p + self.obs.loc[k];
                for i in 0..p {
                    info[(s, i)] += wk * xk[i];
                }
                info[(s, s)] += wk;
            }
        }
        for i in 0..p {
            info[(i, i)] += self.prior_precision[i];
        }
        if let Some(pr) = self.process {
            let rinv = pr.chol.inverse();
            let l = rinv.rows();
            for i in 0..l {
                for j in 0..=i {
                    info[(p + i, p + j)] += pr.precision * rinv[(i, j)];
                }
            }
        }
        for i in 0..dim {
            for j in 0..i {
                info[(j, i)] = info[(i, j)];
            }
        }
        info
    }
}

/// Which likelihood drives the dispersion block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DispersionLikelihood {
    /// `Σ d/(2φ) + ½ log φ I(y>0)`, closed-form gradient.
    #[default]
    Saddlepoint,
    /// Exact series log-density; gradient from the series' mean jump count.
    Series,
}

/// How the dispersion-block gradient is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GradientMode {
    Analytic,
    /// Central differences with `h = 1e-6·(1+|γ_v|)`.
    Numeric,
}

/// Conditional log-posterior of `γ` given the means and `ξ`.
#[derive(Debug)]
pub struct DispersionTarget<'a> {
    obs: &'a ObservationSet,
    xi: f64,
    mu: Vec<f64>,
    deviance: Vec<f64>,
    offset: Vec<f64>,
    prior_precision: Vec<f64>,
    likelihood: DispersionLikelihood,
    clamped: Cell<bool>,
}

impl<'a> DispersionTarget<'a> {
    pub fn new(
        obs: &'a ObservationSet,
        mu: &[f64],
        xi: f64,
        prior_precision: Vec<f64>,
        likelihood: DispersionLikelihood,
    ) -> Self {
        let deviance = obs
            .y
            .iter()
            .zip(mu)
            .map(|(&y, &m)| unit_deviance(y, m, xi))
            .collect();
        let s = obs.offset_sign.factor() * (2.0 - xi);
        DispersionTarget {
            obs,
            xi,
            mu: mu.to_vec(),
            deviance,
            offset: obs.log_exposure.iter().map(|lt| s * lt).collect(),
            prior_precision,
            likelihood,
            clamped: Cell::new(false),
        }
    }

    pub fn dim(&self) -> usize {
        self.obs.q()
    }

    pub fn clamped(&self) -> bool {
        self.clamped.get()
    }

    fn log_phi(&self, gamma: &[f64]) -> Vec<f64> {
        (0..self.obs.n())
            .map(|k| clamp_eta(self.offset[k] + dot(self.obs.z.row(k), gamma), &self.clamped))
            .collect()
    }

    fn log_prior(&self, gamma: &[f64]) -> f64 {
        -0.5 * gamma
            .iter()
            .zip(&self.prior_precision)
            .map(|(g, p)| p * g * g)
            .sum::<f64>()
    }

    pub fn log_density(&self, gamma: &[f64]) -> f64 {
        let log_phi = self.log_phi(gamma);
        let mut ll = 0.0;
        match self.likelihood {
            DispersionLikelihood::Saddlepoint => {
                for (k, &lp) in log_phi.iter().enumerate() {
                    ll -= 0.5 * self.deviance[k] * libm::exp(-lp);
                    if self.obs.y[k] > 0.0 {
                        ll -= 0.5 * lp;
                    }
                }
            }
            DispersionLikelihood::Series => {
                for (k, &lp) in log_phi.iter().enumerate() {
                    ll += tweedie::log_density_unchecked(
                        self.obs.y[k],
                        self.mu[k],
                        libm::exp(lp),
                        self.xi,
                        DensityMethod::Series,
                    );
                }
            }
        }
        ll + self.log_prior(gamma)
    }

    pub fn log_density_and_gradient(&self, gamma: &[f64]) -> (f64, Vec<f64>) {
        let log_phi = self.log_phi(gamma);
        let q = self.obs.q();
        let mut grad = vec![0.0; q];
        let mut ll = 0.0;
        for (k, &lp) in log_phi.iter().enumerate() {
            let y = self.obs.y[k];
            // d log f / d log φ for this observation.
            let score = match self.likelihood {
                DispersionLikelihood::Saddlepoint => {
                    let half_dev = 0.5 * self.deviance[k] * libm::exp(-lp);
                    ll -= half_dev;
                    if y > 0.0 {
                        ll -= 0.5 * lp;
                        half_dev - 0.5
                    } else {
                        half_dev
                    }
                }
                DispersionLikelihood::Series => {
                    let phi = libm::exp(lp);
                    let mu = self.mu[k];
                    let kappa = cumulant(mu, self.xi);
                    if y > 0.0 {
                        let s = tweedie::series(y, phi, self.xi);
                        let mu1 = libm::pow(mu, 1.0 - self.xi);
                        let expo = (y * mu1 / (1.0 - self.xi) - kappa) / phi;
                        ll += s.log_a + expo;
                        -s.mean_jumps / (self.xi - 1.0) - expo
                    } else {
                        ll -= kappa / phi;
                        kappa / phi
                    }
                }
            };
            axpy(score, self.obs.z.row(k), &mut grad);
        }
        for v in 0..q {
            grad[v] -= self.prior_precision[v] * gamma[v];
        }
        (ll + self.log_prior(gamma), grad)
    }

    pub fn gradient(&self, gamma: &[f64], mode: GradientMode) -> Vec<f64> {
        match mode {
            GradientMode::Analytic => self.log_density_and_gradient(gamma).1,
            GradientMode::Numeric => {
                let mut g = gamma.to_vec();
                (0..gamma.len())
                    .map(|v| {
                        let h = 1e-6 * (1.0 + gamma[v].abs());
                        g[v] = gamma[v] + h;
                        let up = self.log_density(&g);
                        g[v] = gamma[v] - h;
                        let dn = self.log_density(&g);
                        g[v] = gamma[v];
                        (up - dn) / (2.0 * h)
                    })
                    .collect()
            }
        }
    }

    /// `½ Zᵀ diag(I(y>0)) Z + P_γ`.
    pub fn fisher_information(&self) -> Matrix {
        let q = self.obs.q();
        let mut info = Matrix::zeros(q, q);
        for k in 0..self.obs.n() {
            if self.obs.y[k] > 0.0 {
                let zk = self.obs.z.row(k);
                for i in 0..q {
                    for j in 0..=i {
                        info[(i, j)] += 0.5 * zk[i] * zk[j];
                    }
                }
            }
        }
        for i in 0..q {
            info[(i, i)] += self.prior_precision[i];
            for j in 0..i {
                info[(j, i)] = info[(i, j)];
            }
        }
        info
    }
}

fn mean_target<'a>(
    obs: &'a ObservationSet,
    state: &'a ModelState,
    kernel: Option<&'a CholState>,
    model: ModelId,
    hyper: &Hyperparameters,
) -> Result<MeanTarget<'a>> {
    state.validate(obs, model)?;
    let pred = linear_predictors(state, obs, model)?;
    let process = if model.is_spatial() {
        let chol = kernel.ok_or_else(|| Error::Config(format!("{model} needs a spatial kernel")))?;
        check_len("kernel dimension", obs.n_sites(), chol.dim())?;
        Some(ProcessPrior {
            chol,
            precision: 1.0 / state.sigma2,
        })
    } else {
        None
    };
    Ok(MeanTarget::new(
        obs,
        &pred.phi,
        state.xi.value(),
        beta_prior_precision(model, state, hyper),
        process,
        None,
    ))
}

fn block_dim(obs: &ObservationSet, model: ModelId) -> usize {
    obs.p() + if model.is_spatial() { obs.n_sites() } else { 0 }
}

/// Log-posterior kernel of the mean block `(β, w)` (just `β` for M1/M2), up to
/// a constant. `kernel` is the factor of the correlation matrix `R(φ_s)`.
pub fn log_post_mean_block(
    beta_w: &[f64],
    obs: &ObservationSet,
    state: &ModelState,
    kernel: Option<&CholState>,
    model: ModelId,
    hyper: &Hyperparameters,
) -> Result<f64> {
    check_len("mean block", block_dim(obs, model), beta_w.len())?;
    Ok(mean_target(obs, state, kernel, model, hyper)?.log_density(beta_w))
}

/// Gradient of [`log_post_mean_block`].
pub fn grad_mean_block(
    beta_w: &[f64],
    obs: &ObservationSet,
    state: &ModelState,
    kernel: Option<&CholState>,
    model: ModelId,
    hyper: &Hyperparameters,
) -> Result<Vec<f64>> {
    check_len("mean block", block_dim(obs, model), beta_w.len())?;
    Ok(mean_target(obs, state, kernel, model, hyper)?.gradient(beta_w))
}

fn dispersion_target<'a>(
    obs: &'a ObservationSet,
    state: &ModelState,
    model: ModelId,
    hyper: &Hyperparameters,
    likelihood: DispersionLikelihood,
) -> Result<DispersionTarget<'a>> {
    state.validate(obs, model)?;
    let pred = linear_predictors(state, obs, model)?;
    Ok(DispersionTarget::new(
        obs,
        &pred.mu,
        state.xi.value(),
        gamma_prior_precision(model, state, hyper),
        likelihood,
    ))
}

/// Saddlepoint log-posterior kernel of `γ`.
pub fn log_post_disp_block(
    gamma: &[f64],
    obs: &ObservationSet,
    state: &ModelState,
    model: ModelId,
    hyper: &Hyperparameters,
) -> Result<f64> {
    check_len("gamma", obs.q(), gamma.len())?;
    Ok(dispersion_target(obs, state, model, hyper, DispersionLikelihood::Saddlepoint)?.log_density(gamma))
}

/// Gradient of [`log_post_disp_block`].
pub fn grad_disp_block(
    gamma: &[f64],
    obs: &ObservationSet,
    state: &ModelState,
    model: ModelId,
    hyper: &Hyperparameters,
    mode: GradientMode,
) -> Result<Vec<f64>> {
    check_len("gamma", obs.q(), gamma.len())?;
    Ok(dispersion_target(obs, state, model, hyper, DispersionLikelihood::Saddlepoint)?.gradient(gamma, mode))
}

/// Exact-series log-posterior of `ξ` (uniform prior). Returns `-∞` outside
/// `(a_ξ, b_ξ)`. Dispersions are recomputed at `ξ` because the offset
/// depends on it.
pub fn log_post_xi(
    xi: f64,
    obs: &ObservationSet,
    state: &ModelState,
    model: ModelId,
    hyper: &Hyperparameters,
) -> Result<f64> {
    let (lo, hi) = hyper.xi_support();
    if !(xi > lo && xi < hi) || !(xi > 1.0 && xi < 2.0) {
        return Ok(f64::NEG_INFINITY);
    }
    state.validate(obs, model)?;
    let clamped = Cell::new(false);
    let mu: Vec<f64> = mean_eta(obs, &state.beta, state.spatial_effects(model))
        .into_iter()
        .map(|e| libm::exp(clamp_eta(e, &clamped)))
        .collect();
    let zg: Vec<f64> = disp_eta(obs, &state.gamma, 2.0);
    Ok(XiTarget::new(obs, mu, zg).log_density(xi, hyper))
}

/// Caches what the `ξ` update needs: means (independent of `ξ`) and `Zγ`.
#[derive(Debug)]
pub(crate) struct XiTarget<'a> {
    obs: &'a ObservationSet,
    mu: Vec<f64>,
    z_gamma: Vec<f64>,
}

impl<'a> XiTarget<'a> {
    pub(crate) fn new(obs: &'a ObservationSet, mu: Vec<f64>, z_gamma: Vec<f64>) -> Self {
        XiTarget { obs, mu, z_gamma }
    }

    pub(crate) fn log_density(&self, xi: f64, hyper: &Hyperparameters) -> f64 {
        let (lo, hi) = hyper.xi_support();
        if !(xi > lo && xi < hi) || !(xi > 1.0 && xi < 2.0) {
            return f64::NEG_INFINITY;
        }
        let s = self.obs.offset_sign.factor() * (2.0 - xi);
        let mut ll = 0.0;
        for k in 0..self.obs.n() {
            let eta = (s * self.obs.log_exposure[k] + self.z_gamma[k]).clamp(-ETA_CLAMP, ETA_CLAMP);
            ll += tweedie::log_density_unchecked(
                self.obs.y[k],
                self.mu[k],
                libm::exp(eta),
                xi,
                DensityMethod::Series,
            );
        }
        ll
    }
}

/// Log-posterior of `φ_s` given `w` and `σ²`: `-½ log|R| - wᵀR⁻¹w/(2σ²)` on
/// `(a_φs, b_φs)`, `-∞` outside or when `R(φ_s)` cannot be factorized.
pub fn log_post_phis(
    phi_s: f64,
    w: &[f64],
    sigma2: f64,
    domain: &SpatialDomain,
    hyper: &Hyperparameters,
) -> f64 {
    match phis_kernel(phi_s, domain, hyper) {
        Some(chol) => phis_log_density(&chol, w, sigma2),
        None => f64::NEG_INFINITY,
    }
}

pub(crate) fn phis_kernel(phi_s: f64, domain: &SpatialDomain, hyper: &Hyperparameters) -> Option<Cholesky> {
    let (lo, hi) = hyper.phis_support();
    if !(phi_s > lo && phi_s < hi) {
        return None;
    }
    match Cholesky::new(&domain.correlation(phi_s, hyper.nu), 0.0) {
        Ok(c) => Some(c),
        Err(e) => {
            log::warn!("phi_s = {phi_s}: {e}");
            None
        }
    }
}

pub(crate) fn phis_log_density(chol: &Cholesky, w: &[f64], sigma2: f64) -> f64 {
    -0.5 * chol.log_det() - 0.5 * chol.quad_form(w) / sigma2
}

/// Expected-information preconditioner of the mean block, `A⁻¹_{β,w}`.
pub fn precondition_mean(
    obs: &ObservationSet,
    state: &ModelState,
    kernel: Option<&CholState>,
    model: ModelId,
    hyper: &Hyperparameters,
) -> Result<Matrix> {
    let target = mean_target(obs, state, kernel, model, hyper)?;
    let mut bw = state.beta.clone();
    if model.is_spatial() {
        bw.extend_from_slice(&state.w);
    }
    Ok(target.fisher_information(&bw))
}

/// Expected-information preconditioner of the dispersion block, `A⁻¹_γ`.
pub fn precondition_disp(
    obs: &ObservationSet,
    state: &ModelState,
    model: ModelId,
    hyper: &Hyperparameters,
) -> Result<Matrix> {
    Ok(dispersion_target(obs, state, model, hyper, DispersionLikelihood::Saddlepoint)?.fisher_information())
}

fn log_normal_prior(x: &[f64], precision: &[f64]) -> f64 {
    x.iter()
        .zip(precision)
        .map(|(v, p)| 0.5 * (libm::log(*p) - libm::log(2.0 * PI)) - 0.5 * p * v * v)
        .sum()
}

fn log_gamma_density(x: f64, shape: f64, rate: f64) -> f64 {
    shape * libm::log(rate) - ln_gamma(shape) + (shape - 1.0) * libm::log(x) - rate * x
}

/// Joint log-posterior (exact series likelihood plus every prior term with
/// its normalizing constant). `kernel` must factor `R(state.phi_s)` for
/// spatial models.
pub fn log_joint_posterior(
    obs: &ObservationSet,
    state: &ModelState,
    kernel: Option<&CholState>,
    model: ModelId,
    hyper: &Hyperparameters,
) -> Result<f64> {
    let pred = linear_predictors(state, obs, model)?;
    let ll = tweedie::log_likelihood(obs, &pred.mu, &pred.phi, state.xi, DensityMethod::Series)?;
    Ok(ll + log_prior(state, kernel, model, hyper)?)
}

/// Sum of all log prior densities at `state`, normalizing constants included.
pub fn log_prior(
    state: &ModelState,
    kernel: Option<&CholState>,
    model: ModelId,
    hyper: &Hyperparameters,
) -> Result<f64> {
    let mut lp = log_normal_prior(&state.beta, &beta_prior_precision(model, state, hyper));
    lp += log_normal_prior(&state.gamma, &gamma_prior_precision(model, state, hyper));
    lp -= libm::log(hyper.b_xi - hyper.a_xi);
    if model.is_spatial() {
        let chol = kernel.ok_or_else(|| Error::Config(format!("{model} needs a spatial kernel")))?;
        check_len("kernel dimension", state.w.len(), chol.dim())?;
        let l = state.w.len() as f64;
        lp -= 0.5 * (l * libm::log(2.0 * PI * state.sigma2) + chol.log_det());
        lp -= 0.5 * chol.quad_form(&state.w) / state.sigma2;
        lp += log_gamma_density(1.0 / state.sigma2, hyper.a_sigma, hyper.b_sigma);
        lp -= libm::log(hyper.b_phis - hyper.a_phis);
    }
    if model.has_selection() {
        for (lat, a, b) in [
            (&state.select_beta, hyper.a_sigma_beta, hyper.b_sigma_beta),
            (&state.select_gamma, hyper.a_sigma_gamma, hyper.b_sigma_gamma),
        ] {
            if let Some(lat) = lat {
                lp += lat.log_prior(a, b);
            }
        }
    }
    Ok(lp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_obs(y: Vec<f64>, t: Vec<f64>, p: usize, q: usize, rng: &mut ChaCha8Rng) -> ObservationSet {
        let n = y.len();
        let x = Matrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { rng.random::<f64>() - 0.5 });
        let z = Matrix::from_fn(n, q, |_, j| if j == 0 { 1.0 } else { rng.random::<f64>() - 0.5 });
        ObservationSet::non_spatial(y, t, x, z).unwrap()
    }

    fn zero_state(obs: &ObservationSet, model: ModelId) -> ModelState {
        let mut s = ModelState::initial(model, obs, &Hyperparameters::default()).unwrap();
        s.beta.iter_mut().for_each(|b| *b = 0.0);
        s.w.iter_mut().for_each(|b| *b = 0.0);
        s
    }

    #[test]
    fn model_id_parsing() {
        assert_eq!("m3".parse::<ModelId>().unwrap(), ModelId::M3);
        assert!("M5".parse::<ModelId>().is_err());
        assert!(ModelId::M4.is_spatial() && ModelId::M4.has_selection());
        assert!(!ModelId::M1.is_spatial() && !ModelId::M1.has_selection());
    }

    #[test]
    fn observation_validation() {
        let x = Matrix::zeros(2, 1);
        assert!(ObservationSet::new(vec![0.0, -1.0], vec![1.0; 2], vec![0; 2], 1, x.clone(), x.clone()).is_err());
        assert!(ObservationSet::new(vec![0.0, 1.0], vec![1.0, 0.0], vec![0; 2], 1, x.clone(), x.clone()).is_err());
        assert!(ObservationSet::new(vec![0.0, 1.0], vec![1.0; 2], vec![0, 3], 2, x.clone(), x.clone()).is_err());
        assert!(ObservationSet::new(vec![0.0], vec![1.0; 2], vec![0; 2], 1, x.clone(), x).is_err());
    }

    #[test]
    fn hyperparameter_validation() {
        assert!(Hyperparameters::default().validate().is_ok());
        let h = Hyperparameters { a_xi: 1.6, b_xi: 1.4, ..Default::default() };
        assert!(h.validate().is_err());
        let h = Hyperparameters { nu0: 1.5, ..Default::default() };
        assert!(h.validate().is_err());
    }

    #[test]
    fn zero_predictor_gives_unit_mean_and_dispersion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs = small_obs(vec![0.0, 1.0, 2.0], vec![1.0; 3], 2, 2, &mut rng);
        let state = zero_state(&obs, ModelId::M1);
        let pred = linear_predictors(&state, &obs, ModelId::M1).unwrap();
        assert_eq!(pred.mu, vec![1.0; 3]);
        assert_eq!(pred.phi, vec![1.0; 3]);
        assert!(!pred.clamped);
    }

    #[test]
    fn exposure_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs = small_obs(vec![0.0, 1.0], vec![2.0; 2], 1, 1, &mut rng);
        let state = zero_state(&obs, ModelId::M1);
        let pred = linear_predictors(&state, &obs, ModelId::M1).unwrap();
        for k in 0..2 {
            assert!((pred.mu[k] - 0.5).abs() < 1e-15);
            assert!((pred.phi[k] - libm::pow(2.0, -0.5)).abs() < 1e-15);
        }
        let flipped = obs.clone().with_offset_sign(OffsetSign::Positive);
        let pred = linear_predictors(&state, &flipped, ModelId::M1).unwrap();
        assert!((pred.mu[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn clamp_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs = small_obs(vec![1.0], vec![1.0], 1, 1, &mut rng);
        let mut state = zero_state(&obs, ModelId::M1);
        state.beta[0] = 1e4;
        let pred = linear_predictors(&state, &obs, ModelId::M1).unwrap();
        assert!(pred.clamped);
        assert!(pred.mu[0].is_finite());
    }

    #[test]
    fn zero_response_mean_block_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let obs = small_obs(vec![0.0; 5], vec![1.0; 5], 2, 1, &mut rng);
        let hyper = Hyperparameters::default();
        let state = zero_state(&obs, ModelId::M1);
        let lp = log_post_mean_block(&[0.0, 0.0], &obs, &state, None, ModelId::M1, &hyper).unwrap();
        // μ = φ = 1, ξ = 1.5: -Σ μ^{0.5}/(2·1·0.5)·2/2 = -5·1/0.5·... = -Σ d/2
        let want = -5.0 * 1.0 / (1.0 * 0.5);
        assert!((lp - want).abs() < 1e-12);
    }

    #[test]
    fn prior_precision_additivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let obs = small_obs(vec![0.0, 1.3, 2.0], vec![1.0; 3], 2, 1, &mut rng);
        let state = zero_state(&obs, ModelId::M1);
        let beta = [0.3, -0.7];
        let h1 = Hyperparameters { sigma2_beta_fixed: 2.0, ..Default::default() };
        let h2 = Hyperparameters { sigma2_beta_fixed: 1.0, ..Default::default() };
        let a = log_post_mean_block(&beta, &obs, &state, None, ModelId::M1, &h1).unwrap();
        let b = log_post_mean_block(&beta, &obs, &state, None, ModelId::M1, &h2).unwrap();
        let norm2 = beta[0] * beta[0] + beta[1] * beta[1];
        assert!((b - a - (-(1.0 - 0.5) / 2.0 * norm2)).abs() < 1e-12);
    }

    #[test]
    fn mean_gradient_prior_part() {
        let x = Matrix::zeros(0, 2);
        let z = Matrix::zeros(0, 1);
        let obs = ObservationSet::non_spatial(vec![], vec![], x, z).unwrap();
        let mut state = zero_state(&obs, ModelId::M1);
        state.beta = vec![1.0, -1.0];
        let hyper = Hyperparameters { sigma2_beta_fixed: 0.5, ..Default::default() };
        let g = grad_mean_block(&[1.0, -1.0], &obs, &state, None, ModelId::M1, &hyper).unwrap();
        assert_eq!(g, vec![-2.0, 2.0]);
    }

    #[test]
    fn mean_gradient_vanishes_at_fit() {
        // y = μ = 1 everywhere and β = 0 (no intercept shift needed).
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let obs = small_obs(vec![1.0; 6], vec![1.0; 6], 3, 2, &mut rng);
        let state = zero_state(&obs, ModelId::M1);
        let g = grad_mean_block(&[0.0; 3], &obs, &state, None, ModelId::M1, &Hyperparameters::default()).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn dispersion_unit_case_and_prior_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let obs = small_obs(vec![0.0, 0.5, 3.0], vec![1.0; 3], 1, 2, &mut rng);
        let state = zero_state(&obs, ModelId::M1);
        let hyper = Hyperparameters::default();
        let lp = log_post_disp_block(&[0.0, 0.0], &obs, &state, ModelId::M1, &hyper).unwrap();
        let d: f64 = obs
            .y()
            .iter()
            .map(|&y| tweedie::deviance(y, 1.0, state.xi).unwrap())
            .sum();
        assert!((lp + d / 2.0).abs() < 1e-12);

        let empty = ObservationSet::non_spatial(vec![], vec![], Matrix::zeros(0, 1), Matrix::zeros(0, 2)).unwrap();
        let st = zero_state(&empty, ModelId::M1);
        let h = Hyperparameters { sigma2_gamma_fixed: 1.0, ..Default::default() };
        let g = grad_disp_block(&[2.0, 0.0], &empty, &st, ModelId::M1, &h, GradientMode::Analytic).unwrap();
        assert_eq!(g, vec![-2.0, 0.0]);
    }

    #[test]
    fn precondition_disp_counts_positive_rows() {
        let y: Vec<f64> = (0..10).map(|i| if i < 7 { 1.0 } else { 0.0 }).collect();
        let x = Matrix::from_fn(10, 1, |_, _| 1.0);
        let obs = ObservationSet::non_spatial(y, vec![1.0; 10], x.clone(), x).unwrap();
        let hyper = Hyperparameters { sigma2_gamma_fixed: 4.0, ..Default::default() };
        let state = zero_state(&obs, ModelId::M1);
        let a = precondition_disp(&obs, &state, ModelId::M1, &hyper).unwrap();
        assert!((a[(0, 0)] - (3.5 + 0.25)).abs() < 1e-15);
    }

    #[test]
    fn precondition_mean_single_observation() {
        let x = Matrix::from_fn(1, 1, |_, _| 1.0);
        let obs = ObservationSet::non_spatial(vec![2.0], vec![1.0], x.clone(), x).unwrap();
        let hyper = Hyperparameters { sigma2_beta_fixed: 2.0, ..Default::default() };
        let mut state = zero_state(&obs, ModelId::M1);
        state.beta = vec![0.4];
        state.gamma = vec![-0.3];
        let a = precondition_mean(&obs, &state, None, ModelId::M1, &hyper).unwrap();
        let mu: f64 = libm::exp(0.4);
        let phi: f64 = libm::exp(-0.3);
        let want = libm::pow(mu, 0.5) / phi + 0.5;
        assert!((a[(0, 0)] - want).abs() < 1e-12);
    }

    #[test]
    fn xi_outside_support_is_neg_infinity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let obs = small_obs(vec![0.0, 1.0], vec![1.0; 2], 1, 1, &mut rng);
        let hyper = Hyperparameters { a_xi: 1.2, b_xi: 1.8, ..Default::default() };
        let state = zero_state(&obs, ModelId::M1);
        assert_eq!(log_post_xi(1.1, &obs, &state, ModelId::M1, &hyper).unwrap(), f64::NEG_INFINITY);
        assert_eq!(log_post_xi(1.8, &obs, &state, ModelId::M1, &hyper).unwrap(), f64::NEG_INFINITY);
        assert!(log_post_xi(1.5, &obs, &state, ModelId::M1, &hyper).unwrap().is_finite());
    }

    #[test]
    fn phis_posterior_degenerate_cases() {
        let hyper = Hyperparameters::default();
        let one = SpatialDomain::new(vec![[0.2, 0.3]]).unwrap();
        for phi in [0.5, 3.0, 20.0] {
            assert_eq!(log_post_phis(phi, &[0.7], 1.3, &one, &hyper), -0.5 * 0.7 * 0.7 / 1.3);
        }
        let two = SpatialDomain::new(vec![[0.0, 0.0], [0.5, 0.0]]).unwrap();
        let r = two.correlation(2.0, 0.5);
        let c = Cholesky::new(&r, 0.0).unwrap();
        assert!((log_post_phis(2.0, &[0.0, 0.0], 1.0, &two, &hyper) + 0.5 * c.log_det()).abs() < 1e-14);
        assert_eq!(log_post_phis(31.0, &[0.0, 0.0], 1.0, &two, &hyper), f64::NEG_INFINITY);
    }
}
