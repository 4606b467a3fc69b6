//! Run configuration: a TOML file overlaid with command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tweedie_dglm::model::OffsetSign;
use tweedie_dglm::samplers::DispersionUpdate;
use tweedie_dglm::synth::{Scenario, SpatialPattern, ZeroSetting};
use tweedie_dglm::{Hyperparameters, McmcConfig, ModelId};

use crate::InputError;

/// Contents of the `--config` file. Every field is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub model: Option<String>,
    pub data: Option<PathBuf>,
    pub coords: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub chains: Option<usize>,
    pub mcmc: McmcSection,
    pub hyper: HyperSection,
    pub simulate: SimulateSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcSection {
    pub iters: usize,
    pub burnin: usize,
    pub thin: usize,
    pub tau_mean: Option<f64>,
    pub tau_disp: Option<f64>,
    pub step_xi: f64,
    pub step_phis: f64,
    pub target_mala: f64,
    pub target_rw: f64,
    pub refresh_interval: usize,
    /// `series-mala`, `series-mala-numeric`, `saddlepoint-mala` or `random-walk`.
    pub dispersion_update: String,
    /// `negative` (log μ = −log t + Xβ) or `positive`.
    pub offset_sign: String,
    /// Drop an all-ones mean column in spatial models; the level is then
    /// carried by `w` and recovered by hierarchical centering.
    pub drop_spatial_intercept: bool,
}

impl Default for McmcSection {
    fn default() -> Self {
        let d = McmcConfig::default();
        McmcSection {
            iters: d.iters,
            burnin: d.burnin,
            thin: d.thin,
            tau_mean: None,
            tau_disp: None,
            step_xi: d.step_xi,
            step_phis: d.step_phis,
            target_mala: d.target_mala,
            target_rw: d.target_rw,
            refresh_interval: d.refresh_interval,
            dispersion_update: "series-mala".into(),
            offset_sign: "negative".into(),
            drop_spatial_intercept: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperSection {
    pub a_xi: f64,
    pub b_xi: f64,
    pub sigma2_beta_fixed: f64,
    pub sigma2_gamma_fixed: f64,
    pub a_sigma: f64,
    pub b_sigma: f64,
    pub a_phis: f64,
    pub b_phis: f64,
    pub nu: f64,
    pub nu0: f64,
    pub a_sigma_beta: f64,
    pub b_sigma_beta: f64,
    pub a_sigma_gamma: f64,
    pub b_sigma_gamma: f64,
    pub fdr_alpha: f64,
    pub fdr_c: f64,
}

impl Default for HyperSection {
    fn default() -> Self {
        let h = Hyperparameters::default();
        HyperSection {
            a_xi: h.a_xi,
            b_xi: h.b_xi,
            sigma2_beta_fixed: h.sigma2_beta_fixed,
            sigma2_gamma_fixed: h.sigma2_gamma_fixed,
            a_sigma: h.a_sigma,
            b_sigma: h.b_sigma,
            a_phis: h.a_phis,
            b_phis: h.b_phis,
            nu: h.nu,
            nu0: h.nu0,
            a_sigma_beta: h.a_sigma_beta,
            b_sigma_beta: h.b_sigma_beta,
            a_sigma_gamma: h.a_sigma_gamma,
            b_sigma_gamma: h.b_sigma_gamma,
            fdr_alpha: h.fdr_alpha,
            fdr_c: h.fdr_c,
        }
    }
}

impl HyperSection {
    pub fn to_core(&self) -> Hyperparameters {
        Hyperparameters {
            a_xi: self.a_xi,
            b_xi: self.b_xi,
            sigma2_beta_fixed: self.sigma2_beta_fixed,
            sigma2_gamma_fixed: self.sigma2_gamma_fixed,
            a_sigma: self.a_sigma,
            b_sigma: self.b_sigma,
            a_phis: self.a_phis,
            b_phis: self.b_phis,
            nu: self.nu,
            nu0: self.nu0,
            a_sigma_beta: self.a_sigma_beta,
            b_sigma_beta: self.b_sigma_beta,
            a_sigma_gamma: self.a_sigma_gamma,
            b_sigma_gamma: self.b_sigma_gamma,
            fdr_alpha: self.fdr_alpha,
            fdr_c: self.fdr_c,
        }
    }
}

/// Synthetic scenario grid for `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub n: usize,
    pub sites: usize,
    pub covariates: usize,
    /// One of 15, 30, 60, 80, 95.
    pub zero_percent: u32,
    pub overlap: f64,
    /// `gp`, `deterministic` or `none`.
    pub pattern: String,
    pub gp_sigma2: f64,
    pub gp_phi_s: f64,
    pub gp_nu: f64,
    pub xi: f64,
    pub beta0: Option<f64>,
    pub replications: usize,
    /// Also fit each replication and report recovery metrics.
    pub fit: bool,
    /// Worker threads for replications (default: all cores).
    pub workers: Option<usize>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            n: 5000,
            sites: 100,
            covariates: 9,
            zero_percent: 30,
            overlap: 1.0,
            pattern: "gp".into(),
            gp_sigma2: 1.5,
            gp_phi_s: 3.0,
            gp_nu: 0.5,
            xi: 1.5,
            beta0: None,
            replications: 1,
            fit: false,
            workers: None,
        }
    }
}

impl SimulateSection {
    pub fn scenario(&self) -> Result<Scenario> {
        let pattern = match self.pattern.as_str() {
            "gp" => Some(SpatialPattern::GpDraw {
                sigma2: self.gp_sigma2,
                phi_s: self.gp_phi_s,
                nu: self.gp_nu,
            }),
            "deterministic" => Some(SpatialPattern::Deterministic),
            "none" => None,
            other => bail!(InputError(format!(
                "simulate.pattern must be gp, deterministic or none, got '{other}'"
            ))),
        };
        let zero = ZeroSetting::from_percent(self.zero_percent)?;
        let mut sc = Scenario::new(self.n, self.sites, zero, self.overlap, pattern);
        sc.covariates = self.covariates;
        sc.xi = self.xi;
        sc.beta0 = self.beta0;
        sc.validate()?;
        Ok(sc)
    }
}

/// Flags shared by every command; each overrides the config file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Model variant.
    #[arg(long, global = true, value_parser = ["M1", "M2", "M3", "M4"])]
    pub model: Option<String>,
    /// Observation CSV (columns y, exposure, location_id, x_*, z_*).
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Site coordinates CSV (columns location_id, s1, s2).
    #[arg(long, global = true)]
    pub coords: Option<PathBuf>,
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub iters: Option<usize>,
    #[arg(long, global = true)]
    pub burnin: Option<usize>,
    #[arg(long, global = true)]
    pub thin: Option<usize>,
    #[arg(long = "fdr-alpha", global = true)]
    pub fdr_alpha: Option<f64>,
    #[arg(long = "fdr-c", global = true)]
    pub fdr_c: Option<f64>,
    #[arg(long, global = true)]
    pub chains: Option<usize>,
}

/// Fully resolved settings. Serialized (as JSON) into `meta.json` and hashed
/// into every output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: Option<String>,
    pub data: Option<PathBuf>,
    pub coords: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub chains: usize,
    pub mcmc: McmcSection,
    pub hyper: HyperSection,
    pub simulate: SimulateSection,
}

fn existing(path: Option<PathBuf>, what: &str) -> Result<Option<PathBuf>> {
    match path {
        Some(p) if !p.exists() => bail!(InputError(format!("{what} file {} does not exist", p.display()))),
        other => Ok(other),
    }
}

impl RunConfig {
    /// Reads the config file (if any) and applies the flag overrides.
    pub fn resolve(flags: &Overrides) -> Result<Self> {
        let file = match existing(flags.config.clone(), "config")? {
            Some(path) => {
                let text = std::fs::read_to_string(&path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str::<FileConfig>(&text)
                    .map_err(|e| InputError(format!("config {}: {e}", path.display())))?
            }
            None => FileConfig::default(),
        };
        let mut mcmc = file.mcmc;
        mcmc.iters = flags.iters.unwrap_or(mcmc.iters);
        mcmc.burnin = flags.burnin.unwrap_or(mcmc.burnin);
        mcmc.thin = flags.thin.unwrap_or(mcmc.thin);
        let mut hyper = file.hyper;
        hyper.fdr_alpha = flags.fdr_alpha.unwrap_or(hyper.fdr_alpha);
        hyper.fdr_c = flags.fdr_c.unwrap_or(hyper.fdr_c);
        let cfg = RunConfig {
            model: flags.model.clone().or(file.model),
            data: existing(flags.data.clone().or(file.data), "data")?,
            coords: existing(flags.coords.clone().or(file.coords), "coords")?,
            out: flags
                .out
                .clone()
                .or(file.out)
                .ok_or_else(|| InputError("an output directory is required (--out)".into()))?,
            seed: flags.seed.or(file.seed).unwrap_or(0),
            chains: flags.chains.or(file.chains).unwrap_or(1),
            mcmc,
            hyper,
            simulate: file.simulate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(m) = &self.model {
            m.parse::<ModelId>()?;
        }
        if self.chains == 0 {
            bail!(InputError("chains must be at least 1".into()));
        }
        self.hyper.to_core().validate()?;
        self.mcmc_config(0).validate()?;
        self.dispersion_update()?;
        self.offset_sign()?;
        Ok(())
    }

    pub fn model_id(&self) -> Result<ModelId> {
        match &self.model {
            Some(m) => Ok(m.parse()?),
            None => bail!(InputError("a model is required (--model M1|M2|M3|M4)".into())),
        }
    }

    pub fn hyperparameters(&self) -> Hyperparameters {
        self.hyper.to_core()
    }

    pub fn dispersion_update(&self) -> Result<DispersionUpdate> {
        Ok(match self.mcmc.dispersion_update.as_str() {
            "series-mala" => DispersionUpdate::SeriesMala,
            "series-mala-numeric" => DispersionUpdate::SeriesMalaNumeric,
            "saddlepoint-mala" => DispersionUpdate::SaddlepointMala,
            "random-walk" => DispersionUpdate::RandomWalk,
            other => bail!(InputError(format!("unknown mcmc.dispersion_update '{other}'"))),
        })
    }

    pub fn offset_sign(&self) -> Result<OffsetSign> {
        Ok(match self.mcmc.offset_sign.as_str() {
            "negative" => OffsetSign::Negative,
            "positive" => OffsetSign::Positive,
            other => bail!(InputError(format!("mcmc.offset_sign must be negative or positive, got '{other}'"))),
        })
    }

    /// Sampler settings for chain `stream`.
    pub fn mcmc_config(&self, stream: u64) -> McmcConfig {
        let m = &self.mcmc;
        McmcConfig {
            iters: m.iters,
            burnin: m.burnin,
            thin: m.thin,
            seed: self.seed,
            stream,
            tau_mean: m.tau_mean,
            tau_disp: m.tau_disp,
            step_xi: m.step_xi,
            step_phis: m.step_phis,
            target_mala: m.target_mala,
            target_rw: m.target_rw,
            refresh_interval: m.refresh_interval,
            dispersion_update: self.dispersion_update().unwrap_or_default(),
            ..McmcConfig::default()
        }
    }

    /// SHA-256 of the canonical JSON form, hex encoded. The output
    /// directory is left out so identical runs hash identically.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

/// Reads a resolved config back from `meta.json`.
pub fn from_meta(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let cfg = v
        .get("config")
        .cloned()
        .ok_or_else(|| InputError(format!("{} has no config record", path.display())))?;
    Ok(serde_json::from_value(cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(out: &str) -> Overrides {
        Overrides {
            out: Some(out.into()),
            ..Default::default()
        }
    }

    #[test]
    fn defaults_match_core() {
        let cfg = RunConfig::resolve(&flags("o")).unwrap();
        assert_eq!(cfg.hyperparameters(), Hyperparameters::default());
        let m = cfg.mcmc_config(0);
        assert_eq!((m.iters, m.burnin, m.thin), (10_000, 5_000, 10));
        assert_eq!(cfg.dispersion_update().unwrap(), DispersionUpdate::SeriesMala);
    }

    #[test]
    fn flags_override_file_and_change_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "model = \"M2\"\nseed = 4\n[mcmc]\niters = 300\nburnin = 100\n[hyper]\nfdr_c = 0.1\n")
            .unwrap();
        let mut f = flags("o");
        f.config = Some(path);
        let a = RunConfig::resolve(&f).unwrap();
        assert_eq!((a.model.as_deref(), a.seed, a.mcmc.iters, a.hyper.fdr_c), (Some("M2"), 4, 300, 0.1));
        f.seed = Some(5);
        f.fdr_alpha = Some(0.1);
        let b = RunConfig::resolve(&f).unwrap();
        assert_eq!((b.seed, b.hyper.fdr_alpha), (5, 0.1));
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), RunConfig::resolve(&{ let mut g = f.clone(); g.seed = None; g.fdr_alpha = None; g }).unwrap().hash());
    }

    #[test]
    fn rejects_bad_values() {
        let mut f = flags("o");
        f.burnin = Some(20_000);
        assert!(RunConfig::resolve(&f).is_err());
        let mut f = flags("o");
        f.data = Some("/definitely/not/here.csv".into());
        let err = RunConfig::resolve(&f).unwrap_err().to_string();
        assert!(err.contains("does not exist"), "{err}");
        let mut f = flags("o");
        f.fdr_alpha = Some(1.5);
        assert!(RunConfig::resolve(&f).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[mcmc]\nunknown_key = 1\n").unwrap();
        let mut f = flags("o");
        f.config = Some(path);
        assert!(RunConfig::resolve(&f).is_err());
    }

    #[test]
    fn scenario_from_section() {
        let s = SimulateSection { pattern: "none".into(), zero_percent: 60, ..Default::default() };
        let sc = s.scenario().unwrap();
        assert_eq!(sc.zero_setting, ZeroSetting::P60);
        assert!(sc.pattern.is_none());
        let bad = SimulateSection { zero_percent: 42, ..Default::default() };
        assert!(bad.scenario().is_err());
    }
}
