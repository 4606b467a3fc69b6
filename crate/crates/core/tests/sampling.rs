mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tweedie_dglm::linalg::Matrix;
use tweedie_dglm::samplers::chain_rng;
use tweedie_dglm::selection::select_chain;
use tweedie_dglm::synth::{evaluate_fit, generate_dataset, Scenario, SpatialPattern, ZeroSetting};
use tweedie_dglm::tweedie::sample_cpg;
use tweedie_dglm::{run_chain, Hyperparameters, McmcConfig, ModelId, TweedieIndex, TweedieParams};

use common::{mean, variance};

#[test]
fn cpg_draws_reproduce_mean_and_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 1_000_000;
    for (mu, phi, xi) in [(0.5, 1.0, 1.2), (1.0, 2.0, 1.5), (5.0, 0.5, 1.8)] {
        let p = TweedieParams::new(mu, phi, TweedieIndex::new(xi).unwrap()).unwrap();
        let xs: Vec<f64> = (0..n).map(|_| sample_cpg(&p, &mut rng)).collect();
        let v = p.variance();
        let (m, s2) = (mean(&xs), variance(&xs));
        let z_mean = (m - mu) / (v / n as f64).sqrt();
        // Var of the sample variance via the fourth central moment.
        let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n as f64;
        let z_var = (s2 - v) / ((m4 - s2 * s2) / n as f64).sqrt();
        assert!(z_mean.abs() < 4.0, "mean z {z_mean} at ({mu},{phi},{xi})");
        assert!(z_var.abs() < 4.0, "variance z {z_var} at ({mu},{phi},{xi})");
    }
}

fn short_config(seed: u64, stream: u64) -> McmcConfig {
    McmcConfig {
        iters: 300,
        burnin: 100,
        thin: 2,
        seed,
        stream,
        ..Default::default()
    }
}

#[test]
fn identical_seeds_give_identical_chains() {
    let sc = Scenario::new(200, 5, ZeroSetting::P30, 1.0, Some(SpatialPattern::gp_default()));
    let data = generate_dataset(&sc, &mut chain_rng(4, 0)).unwrap();
    let hyper = Hyperparameters::default();
    let run = |stream| run_chain(ModelId::M4, &data.obs, data.domain.as_ref(), &hyper, &short_config(8, stream)).unwrap();
    let (a, b, c) = (run(0), run(0), run(1));
    assert_eq!(a, b);
    assert_ne!(a.draws, c.draws);
    assert_eq!(a.kept(), 100);
}

#[test]
fn truth_as_estimate_scores_perfectly() {
    let sc = Scenario::new(300, 6, ZeroSetting::P60, 0.5, Some(SpatialPattern::gp_default()));
    let data = generate_dataset(&sc, &mut chain_rng(21, 0)).unwrap();
    let mut chain = run_chain(ModelId::M4, &data.obs, data.domain.as_ref(), &Hyperparameters::default(), &short_config(1, 0)).unwrap();
    let t = &data.truth;
    let mut row: Vec<f64> = t.beta.clone();
    row.extend(&t.gamma);
    row.push(t.xi);
    row.extend(&t.w);
    let width = chain.draws.cols();
    row.resize(width, 1.0);
    chain.draws = Matrix::from_fn(chain.kept(), width, |_, j| row[j]);
    let sel = select_chain(&chain, 0.05, 0.05).unwrap();
    let m = evaluate_fit(t, &chain, Some(&sel)).unwrap();
    assert!(m.mse_beta < 1e-24 && m.mse_gamma < 1e-24 && m.mse_xi < 1e-24, "{m:?}");
    assert!(m.mse_w.unwrap() < 1e-24);
    assert_eq!((m.cp_beta, m.cp_gamma, m.cp_w), (1.0, 1.0, Some(1.0)));
    assert_eq!((m.fpr, m.tpr), (Some(0.0), Some(1.0)));
}

/// A small non-spatial fit recovers its generating coefficients.
#[test]
fn m1_recovers_coefficients() {
    let sc = Scenario::new(1500, 1, ZeroSetting::P30, 1.0, None);
    let data = generate_dataset(&sc, &mut chain_rng(33, 0)).unwrap();
    let cfg = McmcConfig {
        iters: 3000,
        burnin: 1000,
        thin: 2,
        seed: 33,
        ..Default::default()
    };
    let chain = run_chain(ModelId::M1, &data.obs, None, &Hyperparameters::default(), &cfg).unwrap();
    let check = |name: String, truth: f64| {
        let xs = chain.column(&name).unwrap();
        let (m, sd) = (mean(&xs), variance(&xs).sqrt());
        assert!((m - truth).abs() < 4.0 * sd + 0.02, "{name}: {m} ± {sd} vs {truth}");
    };
    for (j, n) in data.truth.names.iter().enumerate() {
        check(format!("beta[{n}]"), data.truth.beta[j]);
        check(format!("gamma[{n}]"), data.truth.gamma[j]);
    }
    check("xi".into(), data.truth.xi);
    let a = chain.acceptance;
    assert!((0.3..0.85).contains(&a.mean) && (0.3..0.85).contains(&a.dispersion), "{a:?}");
}
