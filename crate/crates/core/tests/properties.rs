mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tweedie_dglm::diagnostics::{hpd_sorted, param_count};
use tweedie_dglm::linalg::Matrix;
use tweedie_dglm::model::{linear_predictors, log_joint_posterior};
use tweedie_dglm::selection::{exclusion_probabilities, fdr_select};
use tweedie_dglm::spatial::{chol_factor, matern, MaternKernel};
use tweedie_dglm::synth::set_overlap;
use tweedie_dglm::tweedie::log_density;
use tweedie_dglm::{DensityMethod, Hyperparameters, ModelId, ModelState, ObservationSet, SpatialDomain, TweedieIndex, TweedieParams};

use common::{correlation_factor, random_instance};

fn state_for(inst: &common::Instance, model: ModelId) -> ModelState {
    let hyper = Hyperparameters::default();
    let mut s = ModelState::initial(model, &inst.obs, &hyper).unwrap();
    s.beta = inst.beta.clone();
    s.gamma = inst.gamma.clone();
    s.xi = TweedieIndex::new(inst.xi).unwrap();
    if model.is_spatial() {
        s.w = inst.w.clone();
        s.phi_s = inst.phi_s;
        s.sigma2 = 0.7;
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn density_scale_invariance(
        y in 0.01f64..20.0, mu in 0.1f64..10.0, phi in 0.1f64..5.0, xi in 1.05f64..1.95, c in 0.1f64..10.0,
    ) {
        let idx = TweedieIndex::new(xi).unwrap();
        let base = TweedieParams::new(mu, phi, idx).unwrap();
        let scaled = TweedieParams::new(c * mu, c.powf(2.0 - xi) * phi, idx).unwrap();
        for method in [DensityMethod::Series, DensityMethod::Saddlepoint] {
            let a = log_density(c * y, &scaled, method).unwrap();
            let b = log_density(y, &base, method).unwrap() - c.ln();
            prop_assert!((a - b).abs() < 1e-9, "{method:?}: {a} vs {b}");
        }
    }

    #[test]
    fn matern_half_is_exponential(d in 0.0f64..5.0, phi in 0.05f64..20.0) {
        prop_assert!((matern(d, phi, 0.5) - (-phi * d).exp()).abs() < 1e-12);
        // The general-order path agrees in the limit.
        prop_assert!((matern(d, phi, 0.5 + 1e-9) - (-phi * d).exp()).abs() < 1e-7);
    }

    #[test]
    fn matern_decreases_in_distance_and_decay(nu in prop::sample::select(vec![0.5, 0.8, 1.5, 2.0, 2.5]), phi in 0.1f64..10.0) {
        let ds: Vec<f64> = (1..40).map(|k| 0.05 * k as f64).collect();
        for w in ds.windows(2) {
            let (a, b) = (matern(w[0], phi, nu), matern(w[1], phi, nu));
            prop_assert!(b < a || a < 1e-300, "d: {a} -> {b}");
        }
        for &d in &ds {
            let (a, b) = (matern(d, phi, nu), matern(d, phi * 1.1, nu));
            prop_assert!(b < a || a < 1e-300, "phi: {a} -> {b}");
        }
    }

    #[test]
    fn covariance_solve_matches_inverse(seed in any::<u64>(), l in 1usize..=20, sigma2 in 0.2f64..3.0, phi in 0.5f64..10.0) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords: Vec<[f64; 2]> = (0..l).map(|_| [rng.random(), rng.random()]).collect();
        let dom = SpatialDomain::new(coords).unwrap();
        let cov = MaternKernel::new(sigma2, phi, 0.5).unwrap().covariance(&dom);
        let chol = chol_factor(&cov, 1e-10).unwrap();
        let w: Vec<f64> = (0..l).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a = chol.solve(&w);
        let b = chol.inverse().mul_vec(&w);
        let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-8 * scale, "{x} vs {y}");
        }
        // And the solve really inverts the covariance.
        let back = cov.mul_vec(&a);
        for (x, y) in back.iter().zip(&w) {
            prop_assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn exposure_scaling_shifts_predictors(seed in any::<u64>(), c in 0.1f64..10.0) {
        let inst = random_instance(30, 3, 2, 4, &mut ChaCha8Rng::seed_from_u64(seed));
        let o = &inst.obs;
        let t: Vec<f64> = o.exposure().iter().map(|t| t * c).collect();
        let scaled = ObservationSet::new(o.y().to_vec(), t, o.loc().to_vec(), o.n_sites(), o.x().clone(), o.z().clone()).unwrap();
        for model in [ModelId::M1, ModelId::M3] {
            let s = state_for(&inst, model);
            let a = linear_predictors(&s, o, model).unwrap();
            let b = linear_predictors(&s, &scaled, model).unwrap();
            for k in 0..o.n() {
                prop_assert!((b.mu[k].ln() - a.mu[k].ln() + c.ln()).abs() < 1e-12);
                prop_assert!((b.phi[k].ln() - a.phi[k].ln() + (2.0 - inst.xi) * c.ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_posterior_is_permutation_invariant(seed in any::<u64>(), shift in 1usize..29) {
        let inst = random_instance(30, 3, 2, 4, &mut ChaCha8Rng::seed_from_u64(seed));
        let perm: Vec<usize> = (0..30).map(|i| (i * 7 + shift) % 30).collect();
        let permuted = inst.obs.permuted(&perm).unwrap();
        let kernel = correlation_factor(&inst.domain, inst.phi_s);
        let hyper = Hyperparameters::default();
        for model in [ModelId::M1, ModelId::M2, ModelId::M3, ModelId::M4] {
            let s = state_for(&inst, model);
            let k = model.is_spatial().then_some(&kernel);
            let a = log_joint_posterior(&inst.obs, &s, k, model, &hyper).unwrap();
            let b = log_joint_posterior(&permuted, &s, k, model, &hyper).unwrap();
            prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{model}: {a} vs {b}");
        }
    }

    #[test]
    fn exclusion_probability_monotone_in_c(rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..60), c1 in 0.0f64..0.5, dc in 0.0f64..0.5) {
        let m = Matrix::from_rows(&rows).unwrap();
        let a = exclusion_probabilities(&m, c1);
        let b = exclusion_probabilities(&m, c1 + dc);
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x <= y));
    }

    #[test]
    fn smaller_alpha_never_selects_more(rows in prop::collection::vec(prop::collection::vec(-0.3f64..0.3, 6), 5..60), a1 in 0.01f64..0.5, da in 0.0f64..0.4) {
        let m = Matrix::from_rows(&rows).unwrap();
        let small = fdr_select(&m, 0.05, a1).unwrap();
        let large = fdr_select(&m, 0.05, a1 + da).unwrap();
        prop_assert!(small.selected.iter().zip(&large.selected).all(|(s, l)| !s || *l));
    }

    #[test]
    fn hpd_no_wider_than_equal_tailed(mut v in prop::collection::vec(-50.0f64..50.0, 1..300), prob in 0.05f64..1.0) {
        v.sort_by(f64::total_cmp);
        let m = v.len();
        let k = ((prob * m as f64).ceil() as usize).clamp(1, m);
        let (lo, hi) = hpd_sorted(&v, prob);
        let start = (m - k) / 2;
        prop_assert!(hi - lo <= v[start + k - 1] - v[start]);
        // The HPD window holds at least ⌈prob·M⌉ draws.
        prop_assert!(v.iter().filter(|&&x| lo <= x && x <= hi).count() >= k);
    }

    #[test]
    fn parameter_counts_follow_table(p in 1usize..200, q in 1usize..200, l in 1usize..500) {
        prop_assert_eq!(param_count(ModelId::M1, p, q, l), p + q + 1);
        prop_assert_eq!(param_count(ModelId::M2, p, q, l), 3 * (p + q) + 1);
        prop_assert_eq!(param_count(ModelId::M3, p, q, l), p + q + l + 4);
        prop_assert_eq!(param_count(ModelId::M4, p, q, l), 3 * (p + q) + l + 4);
    }

    #[test]
    fn overlap_is_symmetric(a in prop::sample::subsequence(vec!["v1", "v2", "v3", "v4", "v5", "v6"], 0..6), b in prop::sample::subsequence(vec!["v1", "v2", "v3", "v4", "v5", "v6"], 0..6)) {
        let x = set_overlap(&a, &b);
        prop_assert_eq!(x, set_overlap(&b, &a));
        prop_assert!((0.0..=1.0).contains(&x));
    }
}
