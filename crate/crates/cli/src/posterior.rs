//! Pooled posterior draws of one or more chains, as stored in `draws.csv`,
//! and the summaries, selections and point estimates derived from them.

use std::path::Path;

use anyhow::{bail, Result};
use tweedie_dglm::diagnostics::{ess_acf, summarize};
use tweedie_dglm::linalg::Matrix;
use tweedie_dglm::samplers::{hierarchical_center, ChainOutput};
use tweedie_dglm::selection::{fdr_select, SelectionReport};
use tweedie_dglm::{Hyperparameters, ModelId, ModelState, ObservationSet, TweedieIndex};

use crate::output::{csv_document, num, read_csv};
use crate::InputError;

/// Selection result of one coefficient block: block name, coefficient names, report.
pub type BlockSelection = (&'static str, Vec<String>, SelectionReport);

pub const HPD_PROB: f64 = 0.95;
const ESS_MAX_LAG: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub chain: Vec<usize>,
    /// 1-based sampler iteration of each kept draw.
    pub iteration: Vec<usize>,
    pub log_posterior: Vec<f64>,
    pub names: Vec<String>,
    pub draws: Matrix,
}

impl Posterior {
    pub fn from_chains(chains: &[ChainOutput], burnin: usize, thin: usize) -> Result<Self> {
        let first = chains.first().ok_or_else(|| InputError("no chains".into()))?;
        let mut post = Posterior {
            chain: Vec::new(),
            iteration: Vec::new(),
            log_posterior: Vec::new(),
            names: first.param_names.clone(),
            draws: Matrix::zeros(0, first.param_names.len()),
        };
        for (c, out) in chains.iter().enumerate() {
            for i in 0..out.kept() {
                post.chain.push(c);
                post.iteration.push(burnin + (i + 1) * thin);
                post.log_posterior.push(out.log_posterior[i]);
                post.draws.push_row(out.draws.row(i))?;
            }
        }
        Ok(post)
    }

    pub fn len(&self) -> usize {
        self.draws.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_chains(&self) -> usize {
        self.chain.iter().max().map_or(0, |c| c + 1)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        self.names.iter().position(|n| n == name).map(|j| self.draws.column(j))
    }

    /// Columns `prefix<name>]`, returning the inner names and the draws.
    pub fn family(&self, prefix: &str) -> (Vec<String>, Matrix) {
        let cols: Vec<usize> = (0..self.names.len()).filter(|&j| self.names[j].starts_with(prefix)).collect();
        let names = cols
            .iter()
            .map(|&j| self.names[j][prefix.len()..].trim_end_matches(']').to_string())
            .collect();
        (names, Matrix::from_fn(self.len(), cols.len(), |i, j| self.draws[(i, cols[j])]))
    }

    pub fn to_csv(&self, hash: &str, seed: u64) -> Result<Vec<u8>> {
        let mut header = vec!["chain", "iteration", "log_posterior"];
        header.extend(self.names.iter().map(String::as_str));
        let rows: Vec<Vec<String>> = (0..self.len())
            .map(|i| {
                let mut r = vec![self.chain[i].to_string(), self.iteration[i].to_string(), num(self.log_posterior[i])];
                r.extend(self.draws.row(i).iter().map(|&v| num(v)));
                r
            })
            .collect();
        csv_document(hash, seed, &header, &rows)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (header, rows) = read_csv(path)?;
        if header.len() < 4 || header[..3] != ["chain", "iteration", "log_posterior"] {
            bail!(InputError(format!(
                "{}: expected columns chain, iteration, log_posterior, <parameters>",
                path.display()
            )));
        }
        let names: Vec<String> = header[3..].to_vec();
        let mut post = Posterior {
            chain: Vec::new(),
            iteration: Vec::new(),
            log_posterior: Vec::new(),
            draws: Matrix::zeros(0, names.len()),
            names,
        };
        for (r, rec) in rows.iter().enumerate() {
            let bad = |col: &str, cell: &str| InputError(format!("{}: row {}, column '{col}': bad value '{cell}'", path.display(), r + 1));
            post.chain.push(rec[0].parse().map_err(|_| bad("chain", &rec[0]))?);
            post.iteration.push(rec[1].parse().map_err(|_| bad("iteration", &rec[1]))?);
            post.log_posterior.push(rec[2].parse().map_err(|_| bad("log_posterior", &rec[2]))?);
            let row = (3..header.len())
                .map(|j| rec[j].parse::<f64>().map_err(|_| bad(&header[j], &rec[j])))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            post.draws.push_row(&row)?;
        }
        if post.is_empty() {
            bail!(InputError(format!("{}: no draws", path.display())));
        }
        Ok(post)
    }

    /// Effective sample size summed over chains (NaN if a chain is too short).
    fn ess(&self, values: &[f64]) -> f64 {
        (0..self.n_chains())
            .map(|c| {
                let xs: Vec<f64> = values.iter().zip(&self.chain).filter(|(_, &k)| k == c).map(|(v, _)| *v).collect();
                ess_acf(&xs, ESS_MAX_LAG).map_or(f64::NAN, |a| a.ess)
            })
            .sum()
    }

    /// Rows of `summary.csv`. With `intercept` set (the name of a mean
    /// intercept dropped from a spatial fit), the level carried by the
    /// spatial effects is reported as `beta[<intercept>]`.
    pub fn summary_rows(&self, intercept: Option<&str>) -> Result<Vec<Vec<String>>> {
        let mut cols: Vec<(String, Vec<f64>)> = Vec::new();
        if let Some(name) = intercept {
            let (_, w) = self.family("w[");
            let (level, _) = hierarchical_center(&w)?;
            cols.push((format!("beta[{name}]"), level));
        }
        for (j, n) in self.names.iter().enumerate() {
            cols.push((n.clone(), self.draws.column(j)));
        }
        cols.into_iter()
            .filter(|(_, v)| v.iter().all(|x| x.is_finite()))
            .map(|(name, v)| {
                let s = summarize(&v, &self.log_posterior, HPD_PROB)?;
                Ok(vec![
                    name,
                    num(s.map_estimate),
                    num(s.mean),
                    num(s.median),
                    num(s.sd),
                    num(s.hpd_lower),
                    num(s.hpd_upper),
                    num(self.ess(&v)),
                ])
            })
            .collect()
    }

    pub fn summary_csv(&self, intercept: Option<&str>, hash: &str, seed: u64) -> Result<Vec<u8>> {
        let header = ["parameter", "map", "mean", "median", "sd", "hpd_lower", "hpd_upper", "ess"];
        csv_document(hash, seed, &header, &self.summary_rows(intercept)?)
    }

    /// FDR selection on the pooled `beta[..]` and `gamma[..]` draws.
    pub fn select(&self, c: f64, alpha: f64) -> Result<Vec<BlockSelection>> {
        let mut out = Vec::new();
        for (block, prefix) in [("mean", "beta["), ("dispersion", "gamma[")] {
            let (names, d) = self.family(prefix);
            out.push((block, names, fdr_select(&d, c, alpha)?));
        }
        Ok(out)
    }

    /// Posterior-median state for `obs` (the data the draws were fitted to).
    pub fn median_state(&self, model: ModelId, obs: &ObservationSet, hyper: &Hyperparameters) -> Result<ModelState> {
        let med = |name: &str| -> Result<f64> {
            let mut v = self
                .column(name)
                .ok_or_else(|| InputError(format!("draws have no column '{name}'")))?;
            v.sort_by(f64::total_cmp);
            let m = v.len();
            Ok(if m % 2 == 1 { v[m / 2] } else { 0.5 * (v[m / 2 - 1] + v[m / 2]) })
        };
        let mut state = ModelState::initial(model, obs, hyper)?;
        for (v, n) in state.beta.iter_mut().zip(obs.x_names()) {
            *v = med(&format!("beta[{n}]"))?;
        }
        for (v, n) in state.gamma.iter_mut().zip(obs.z_names()) {
            *v = med(&format!("gamma[{n}]"))?;
        }
        state.xi = TweedieIndex::new(med("xi")?)?;
        if model.is_spatial() {
            for (i, v) in state.w.iter_mut().enumerate() {
                *v = med(&format!("w[{i}]"))?;
            }
            state.sigma2 = med("sigma2")?;
            state.phi_s = med("phi_s")?;
        }
        Ok(state)
    }
}

/// Rows of `selection.csv`.
pub fn selection_rows(sel: &[BlockSelection]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (block, names, r) in sel {
        for (j, n) in names.iter().enumerate() {
            rows.push(vec![
                block.to_string(),
                n.clone(),
                num(r.p_values[j]),
                r.selected[j].to_string(),
                r.kappa.map_or_else(|| "NA".into(), num),
                num(r.c),
                num(r.alpha_level),
            ]);
        }
    }
    rows
}

pub const SELECTION_HEADER: [&str; 7] = ["block", "coefficient", "p_value", "selected", "kappa", "c", "alpha"];
