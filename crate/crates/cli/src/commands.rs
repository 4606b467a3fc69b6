//! The `fit`, `simulate`, `select`, `predict` and `summarize` commands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use log::info;
use serde_json::{json, Value};
use tweedie_dglm::diagnostics::{aic, predict as score};
use tweedie_dglm::model::linear_predictors;
use tweedie_dglm::samplers::{chain_rng, run_chain, ChainOutput};
use tweedie_dglm::selection::select_chain;
use tweedie_dglm::synth::{evaluate_fit, generate_dataset, selection_rates, set_overlap, FitMetrics, SyntheticTruth};
use tweedie_dglm::tweedie::log_likelihood;
use tweedie_dglm::{DensityMethod, ModelId, ObservationSet, SpatialDomain};

use crate::config::{self, Overrides, RunConfig};
use crate::data::{load_dataset, write_coords, write_dataset};
use crate::output::{atomic_write, csv_document, num, write_json};
use crate::posterior::{selection_rows, BlockSelection, Posterior, SELECTION_HEADER};
use crate::InputError;

/// A fitted model with everything needed to write its outputs.
pub struct Fit {
    pub model: ModelId,
    pub obs: ObservationSet,
    pub chains: Vec<ChainOutput>,
    pub seconds: Vec<f64>,
    pub posterior: Posterior,
    /// Mean intercept dropped because the spatial effects carry the level.
    pub dropped_intercept: Option<String>,
}

/// Drops the mean intercept of a spatial fit when configured to.
fn prepare(cfg: &RunConfig, model: ModelId, obs: ObservationSet) -> Result<(ObservationSet, Option<String>)> {
    if model.is_spatial() && cfg.mcmc.drop_spatial_intercept {
        if let Some(j) = obs.mean_intercept() {
            let name = obs.x_names()[j].clone();
            return Ok((obs.drop_mean_column(j)?, Some(name)));
        }
    }
    Ok((obs, None))
}

/// Runs `cfg.chains` independent chains in parallel; chain `c` uses stream
/// `c`, so results do not depend on scheduling.
pub fn fit_observations(cfg: &RunConfig, model: ModelId, obs: ObservationSet, domain: Option<&SpatialDomain>, seed: u64) -> Result<Fit> {
    use rayon::prelude::*;
    let (obs, dropped_intercept) = prepare(cfg, model, obs)?;
    let hyper = cfg.hyperparameters();
    let runs: Vec<(ChainOutput, f64)> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| {
            let mut mc = cfg.mcmc_config(c as u64);
            mc.seed = seed;
            let start = Instant::now();
            let out = run_chain(model, &obs, domain, &hyper, &mc).with_context(|| format!("chain {c}"))?;
            let secs = start.elapsed().as_secs_f64();
            let a = out.acceptance;
            info!(
                "chain {c}: {secs:.1}s, acceptance mean {:.2} dispersion {:.2} xi {:.2}{}",
                a.mean,
                a.dispersion,
                a.xi,
                a.phi_s.map_or(String::new(), |v| format!(" phi_s {v:.2}"))
            );
            Ok((out, secs))
        })
        .collect::<Result<_>>()?;
    let (chains, seconds): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    let posterior = Posterior::from_chains(&chains, cfg.mcmc.burnin, cfg.mcmc.thin)?;
    Ok(Fit {
        model,
        obs,
        chains,
        seconds,
        posterior,
        dropped_intercept,
    })
}

/// The chains of a fit concatenated into one.
fn pooled_chain(fit: &Fit) -> Result<ChainOutput> {
    let mut pooled = fit.chains[0].clone();
    pooled.draws = fit.posterior.draws.clone();
    pooled.log_posterior = fit.posterior.log_posterior.clone();
    Ok(pooled)
}

fn log_likelihood_at_median(fit: &Fit, cfg: &RunConfig) -> Result<f64> {
    let state = fit.posterior.median_state(fit.model, &fit.obs, &cfg.hyperparameters())?;
    let pred = linear_predictors(&state, &fit.obs, fit.model)?;
    Ok(log_likelihood(&fit.obs, &pred.mu, &pred.phi, state.xi, DensityMethod::Series)?)
}

fn selection_csv(post: &Posterior, c: f64, alpha: f64, hash: &str, seed: u64) -> Result<(Vec<u8>, Vec<BlockSelection>)> {
    let sel = post.select(c, alpha)?;
    Ok((csv_document(hash, seed, &SELECTION_HEADER, &selection_rows(&sel))?, sel))
}

/// Writes draws, summary, selection (models with selection) and meta.
pub fn write_fit(dir: &Path, cfg: &RunConfig, fit: &Fit, location_ids: &[String], seed: u64) -> Result<()> {
    let hash = cfg.hash();
    atomic_write(&dir.join("draws.csv"), &fit.posterior.to_csv(&hash, seed)?)?;
    atomic_write(
        &dir.join("summary.csv"),
        &fit.posterior.summary_csv(fit.dropped_intercept.as_deref(), &hash, seed)?,
    )?;
    if fit.model.has_selection() {
        let (bytes, _) = selection_csv(&fit.posterior, cfg.hyper.fdr_c, cfg.hyper.fdr_alpha, &hash, seed)?;
        atomic_write(&dir.join("selection.csv"), &bytes)?;
    }
    let loglik = log_likelihood_at_median(fit, cfg)?;
    let (p, q, l) = (fit.obs.p(), fit.obs.q(), fit.obs.n_sites());
    let chains: Vec<Value> = fit
        .chains
        .iter()
        .zip(&fit.seconds)
        .map(|(c, s)| {
            json!({
                "stream": c.stream,
                "acceptance": {
                    "mean": c.acceptance.mean,
                    "dispersion": c.acceptance.dispersion,
                    "xi": c.acceptance.xi,
                    "phi_s": c.acceptance.phi_s,
                },
                "steps": {
                    "tau_mean": c.steps.tau_mean,
                    "tau_disp": c.steps.tau_disp,
                    "step_xi": c.steps.step_xi,
                    "step_phis": c.steps.step_phis,
                },
                "clamp_events": c.clamp_events,
                "seconds": s,
            })
        })
        .collect();
    let meta = json!({
        "config": cfg,
        "config_hash": hash,
        "seed": seed,
        "model": fit.model.as_str(),
        "n": fit.obs.n(),
        "p": p,
        "q": q,
        "sites": l,
        "x_names": fit.obs.x_names(),
        "z_names": fit.obs.z_names(),
        "dropped_intercept": fit.dropped_intercept,
        "location_ids": location_ids,
        "chains": chains,
        "log_likelihood_at_median": loglik,
        "aic": aic(loglik, fit.model, p, q, l),
    });
    write_json(&dir.join("meta.json"), &meta)
}

fn require_data(cfg: &RunConfig) -> Result<&Path> {
    cfg.data
        .as_deref()
        .ok_or_else(|| InputError("a data file is required (--data)".into()).into())
}

pub fn fit(cfg: &RunConfig) -> Result<()> {
    let model = cfg.model_id()?;
    let data = require_data(cfg)?;
    let coords = if model.is_spatial() {
        Some(cfg.coords.as_deref().ok_or_else(|| {
            InputError(format!("model {model} is spatial and needs a coordinates file (--coords)"))
        })?)
    } else {
        if cfg.coords.is_some() {
            log::warn!("model {model} is not spatial; ignoring --coords");
        }
        None
    };
    let ds = load_dataset(data, coords, None, cfg.offset_sign()?)?;
    info!(
        "fitting {model} to {} rows ({} mean, {} dispersion covariates, {} sites)",
        ds.obs.n(),
        ds.obs.p(),
        ds.obs.q(),
        ds.location_ids.len()
    );
    let fit = fit_observations(cfg, model, ds.obs, ds.domain.as_ref(), cfg.seed)?;
    write_fit(&cfg.out, cfg, &fit, &ds.location_ids, cfg.seed)
}

/// Metadata of an existing fit directory.
pub struct FitDir {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub meta: Value,
    pub posterior: Posterior,
}

impl FitDir {
    pub fn open(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        if !meta_path.exists() {
            bail!(InputError(format!("{} is not a fit directory (no meta.json)", dir.display())));
        }
        let config = config::from_meta(&meta_path)?;
        let meta: Value = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
        let posterior = Posterior::read(&dir.join("draws.csv"))?;
        Ok(FitDir {
            dir: dir.to_path_buf(),
            config,
            meta,
            posterior,
        })
    }

    pub fn seed(&self) -> u64 {
        self.meta["seed"].as_u64().unwrap_or(self.config.seed)
    }

    pub fn hash(&self) -> String {
        self.meta["config_hash"].as_str().map_or_else(|| self.config.hash(), String::from)
    }

    pub fn model(&self) -> Result<ModelId> {
        Ok(self.meta["model"]
            .as_str()
            .ok_or_else(|| InputError("meta.json has no model".into()))?
            .parse()?)
    }

    fn strings(&self, key: &str) -> Vec<String> {
        self.meta[key]
            .as_array()
            .map(|a| a.iter().filter_map(|v| v.as_str().map(String::from)).collect())
            .unwrap_or_default()
    }

    pub fn dropped_intercept(&self) -> Option<String> {
        self.meta["dropped_intercept"].as_str().map(String::from)
    }
}

/// Recomputes `summary.csv` from `draws.csv`.
pub fn summarize(dir: &Path) -> Result<()> {
    let f = FitDir::open(dir)?;
    let bytes = f.posterior.summary_csv(f.dropped_intercept().as_deref(), &f.hash(), f.seed())?;
    atomic_write(&dir.join("summary.csv"), &bytes)
}

/// Re-runs FDR selection on `draws.csv`, optionally scoring it against a
/// `truth.json` from `simulate`.
pub fn select(dir: &Path, flags: &Overrides, truth: Option<&Path>) -> Result<()> {
    let f = FitDir::open(dir)?;
    let mut cfg = f.config.clone();
    cfg.hyper.fdr_alpha = flags.fdr_alpha.unwrap_or(cfg.hyper.fdr_alpha);
    cfg.hyper.fdr_c = flags.fdr_c.unwrap_or(cfg.hyper.fdr_c);
    cfg.validate()?;
    let (bytes, sel) = selection_csv(&f.posterior, cfg.hyper.fdr_c, cfg.hyper.fdr_alpha, &cfg.hash(), f.seed())?;
    atomic_write(&dir.join("selection.csv"), &bytes)?;
    for (block, names, r) in &sel {
        let chosen: Vec<&str> = names.iter().zip(&r.selected).filter(|(_, &s)| s).map(|(n, _)| n.as_str()).collect();
        info!("{block}: selected [{}]", chosen.join(", "));
    }
    if let Some(path) = truth {
        let t = read_truth(path)?;
        let mut m = selection_metrics(&t, &sel);
        m["config_hash"] = json!(cfg.hash());
        m["seed"] = json!(f.seed());
        write_json(&dir.join("selection_metrics.json"), &m)?;
        info!("selection against truth: {m}");
    }
    Ok(())
}

struct Truth {
    names: Vec<String>,
    active_mean: Vec<String>,
    active_dispersion: Vec<String>,
}

fn read_truth(path: &Path) -> Result<Truth> {
    let v: Value = serde_json::from_str(&std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)
        .map_err(|e| InputError(format!("{}: {e}", path.display())))?;
    let list = |k: &str| -> Result<Vec<String>> {
        v[k].as_array()
            .ok_or_else(|| InputError(format!("{}: missing array '{k}'", path.display())))?
            .iter()
            .map(|x| x.as_str().map(String::from).ok_or_else(|| InputError(format!("{}: '{k}' must hold strings", path.display())).into()))
            .collect()
    };
    Ok(Truth {
        names: list("names")?,
        active_mean: list("active_mean")?,
        active_dispersion: list("active_dispersion")?,
    })
}

/// FPR and TPR pooled over both blocks (intercept excluded), plus overlap.
fn selection_metrics(t: &Truth, sel: &[BlockSelection]) -> Value {
    let cands: Vec<&str> = t.names.iter().skip(1).map(String::as_str).collect();
    let chosen = |i: usize| -> Vec<&str> {
        let (_, names, r) = &sel[i];
        names
            .iter()
            .zip(&r.selected)
            .filter(|(n, &s)| s && cands.contains(&n.as_str()))
            .map(|(n, _)| n.as_str())
            .collect()
    };
    let (sm, sd) = (chosen(0), chosen(1));
    let am: Vec<&str> = t.active_mean.iter().map(String::as_str).collect();
    let ad: Vec<&str> = t.active_dispersion.iter().map(String::as_str).collect();
    let (fm, tm) = selection_rates(&sm, &am, &cands);
    let (fd, td) = selection_rates(&sd, &ad, &cands);
    let pool = |a: f64, wa: usize, b: f64, wb: usize| {
        if wa + wb == 0 {
            0.0
        } else {
            (a * wa as f64 + b * wb as f64) / (wa + wb) as f64
        }
    };
    let (nm, nd) = (cands.len() - am.len(), cands.len() - ad.len());
    json!({
        "fpr": pool(fm, nm, fd, nd),
        "tpr": pool(tm, am.len(), td, ad.len()),
        "overlap": set_overlap(&sm, &sd),
        "selected_mean": sm,
        "selected_dispersion": sd,
    })
}

/// Scores new observations at the posterior-median state of a fit. Spatial
/// fits only predict at fitted locations.
pub fn predict(dir: &Path, data: &Path) -> Result<()> {
    let f = FitDir::open(dir)?;
    let model = f.model()?;
    let cfg = &f.config;
    let location_ids = f.strings("location_ids");
    let known = model.is_spatial().then_some(location_ids.as_slice());
    let ds = load_dataset(data, None, known, cfg.offset_sign()?)?;
    let mut obs = ds.obs;
    if let Some(name) = f.dropped_intercept() {
        let j = obs
            .x_names()
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| InputError(format!("{}: missing column 'x_{name}' used by the fit", data.display())))?;
        obs = obs.drop_mean_column(j)?;
    }
    if obs.x_names() != f.strings("x_names").as_slice() || obs.z_names() != f.strings("z_names").as_slice() {
        bail!(InputError(format!(
            "{}: covariate columns differ from the fitted model (mean {:?}, dispersion {:?})",
            data.display(),
            f.strings("x_names"),
            f.strings("z_names")
        )));
    }
    let state = f.posterior.median_state(model, &obs, &cfg.hyperparameters())?;
    let pred = score(&state, &obs, model)?;
    let hash = f.hash();
    let seed = f.seed();
    let rows: Vec<Vec<String>> = (0..obs.n())
        .map(|k| {
            let site = &ds.location_ids[obs.loc()[k]];
            vec![(k + 1).to_string(), site.clone(), num(obs.y()[k]), num(pred.mu[k]), num(pred.phi[k])]
        })
        .collect();
    atomic_write(
        &dir.join("predictions.csv"),
        &csv_document(&hash, seed, &["row", "location_id", "y", "mu", "phi"], &rows)?,
    )?;
    write_json(
        &dir.join("prediction.json"),
        &json!({
            "config_hash": hash,
            "seed": seed,
            "data": data,
            "n": obs.n(),
            "sqrt_deviance": pred.sqrt_deviance,
            "xi": state.xi.value(),
        }),
    )?;
    info!("sqrt deviance {}", pred.sqrt_deviance);
    Ok(())
}

fn truth_json(t: &SyntheticTruth, cfg: &RunConfig) -> Value {
    json!({
        "names": t.names,
        "beta": t.beta,
        "gamma": t.gamma,
        "w": t.w,
        "xi": t.xi,
        "active_mean": t.active_mean,
        "active_dispersion": t.active_dispersion,
        "overlap": t.overlap,
        "scenario": cfg.simulate,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
    })
}

const METRICS_HEADER: [&str; 12] = [
    "replication", "mse_beta", "mse_gamma", "mse_xi", "mse_w", "cp_beta", "cp_gamma", "cp_coefficients", "cp_w", "fpr", "tpr", "overlap",
];

fn metrics_row(rep: usize, m: &FitMetrics, p: usize, q: usize) -> Vec<String> {
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), num);
    vec![
        rep.to_string(),
        num(m.mse_beta),
        num(m.mse_gamma),
        num(m.mse_xi),
        opt(m.mse_w),
        num(m.cp_beta),
        num(m.cp_gamma),
        num(m.cp_coefficients(p, q)),
        opt(m.cp_w),
        opt(m.fpr),
        opt(m.tpr),
        opt(m.overlap),
    ]
}

/// One replication: generate, write, and optionally fit and score.
fn replicate(cfg: &RunConfig, rep: usize) -> Result<Option<Vec<String>>> {
    let sc = cfg.simulate.scenario()?;
    // Data streams sit above any chain stream.
    let mut rng = chain_rng(cfg.seed, (1 << 32) + rep as u64);
    let data = generate_dataset(&sc, &mut rng)?;
    let dir = cfg.out.join(format!("rep_{rep:03}"));
    let ids: Vec<String> = (0..data.obs.n_sites()).map(|i| format!("s{i}")).collect();
    let hash = cfg.hash();
    write_dataset(&dir.join("data.csv"), &data.obs, &ids, Some((&hash, cfg.seed)))?;
    if let Some(d) = &data.domain {
        write_coords(&dir.join("coords.csv"), d, &ids, Some((&hash, cfg.seed)))?;
    }
    write_json(&dir.join("truth.json"), &truth_json(&data.truth, cfg))?;
    if !cfg.simulate.fit {
        return Ok(None);
    }
    let model = cfg.model_id()?;
    let domain = if model.is_spatial() {
        Some(data.domain.as_ref().ok_or_else(|| {
            InputError(format!("model {model} is spatial but simulate.pattern is 'none'"))
        })?)
    } else {
        None
    };
    let seed = cfg.seed.wrapping_add(rep as u64);
    let fit = fit_observations(cfg, model, data.obs.clone(), domain, seed)?;
    write_fit(&dir, cfg, &fit, &ids, seed)?;
    let pooled = pooled_chain(&fit)?;
    let sel = if model.has_selection() {
        Some(select_chain(&pooled, cfg.hyper.fdr_c, cfg.hyper.fdr_alpha)?)
    } else {
        None
    };
    let m = evaluate_fit(&data.truth, &pooled, sel.as_ref())?;
    info!("replication {rep}: {m:?}");
    Ok(Some(metrics_row(rep, &m, fit.obs.p().max(data.truth.beta.len()), fit.obs.q())))
}

/// Generates `simulate.replications` data sets in parallel.
pub fn simulate(cfg: &RunConfig) -> Result<()> {
    use rayon::prelude::*;
    let sim = &cfg.simulate;
    if sim.replications == 0 {
        bail!(InputError("simulate.replications must be at least 1".into()));
    }
    if sim.fit {
        cfg.model_id()?;
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = sim.workers {
        pool = pool.num_threads(w);
    }
    let pool = pool.build()?;
    let rows: Vec<Option<Vec<String>>> =
        pool.install(|| (0..sim.replications).into_par_iter().map(|r| replicate(cfg, r)).collect::<Result<_>>())?;
    let rows: Vec<Vec<String>> = rows.into_iter().flatten().collect();
    if !rows.is_empty() {
        atomic_write(&cfg.out.join("metrics.csv"), &csv_document(&cfg.hash(), cfg.seed, &METRICS_HEADER, &rows)?)?;
    }
    write_json(&cfg.out.join("simulate.json"), &json!({ "config": cfg, "config_hash": cfg.hash(), "seed": cfg.seed }))
}
