use proptest::prelude::*;

use epismc_core::comparison::{clpbf, dic, waic, PlSeries};
use epismc_core::dist::nb_logpmf;
use epismc_core::dynamics::{ode_step, OdeState};
use epismc_core::filters::{ess, normalise, systematic_indices};
use epismc_core::hsmm::{duration_logpmf, is_feasible};
use epismc_core::observation::nb_mean_phi_logpmf;
use epismc_core::{FixedConfig, Hsmm, ParamLayout, PriorSpec, ThetaParams};

mod common;

fn log_weights() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(
        prop_oneof![9 => -50.0..50.0f64, 1 => Just(f64::NEG_INFINITY)],
        1..64,
    )
    .prop_filter("at least one finite weight", |v| v.iter().any(|x| x.is_finite()))
}

fn theta_from(seed: u64, k: usize) -> ThetaParams {
    let prior = PriorSpec::default_for(k);
    let cfg = FixedConfig::new(k, 1e6);
    prior.sample(cfg.layout(), &mut epismc_core::seeded(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn normalised_weights_sum_to_one(lw in log_weights()) {
        let w = normalise(&lw).unwrap();
        let s: f64 = w.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn ess_is_between_one_and_m(lw in log_weights()) {
        let e = ess(&lw);
        prop_assert!(e >= 1.0 - 1e-9 && e <= lw.len() as f64 + 1e-9);
    }

    #[test]
    fn systematic_counts_are_floor_or_ceil(lw in log_weights(), u in 0.0..1.0f64) {
        let w = normalise(&lw).unwrap();
        let n = w.len();
        let idx = systematic_indices(&w, n, u);
        prop_assert_eq!(idx.len(), n);
        prop_assert!(idx.windows(2).all(|p| p[0] <= p[1]));
        for (i, &wi) in w.iter().enumerate() {
            let c = idx.iter().filter(|&&j| j == i).count() as f64;
            let target = n as f64 * wi;
            prop_assert!(c >= (target - 1e-9).floor() && c <= (target + 1e-9).ceil(),
                "slot {} weight {} count {}", i, wi, c);
        }
    }

    #[test]
    fn bijection_round_trips(v in prop::collection::vec(-3.0..3.0f64, 24)) {
        let layout = ParamLayout::new(4, 3);
        let theta = ThetaParams::from_unconstrained(&v, layout).unwrap();
        prop_assert!(theta.validate().is_ok());
        let back = theta.to_unconstrained().unwrap();
        for (a, b) in v.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-8, "{} vs {}", a, b);
        }
    }

    #[test]
    fn duration_pmf_sums_to_one(r in 0.5..60.0f64, psi in 0.2..0.95f64) {
        let s: f64 = (0..20_000u32).map(|d| duration_logpmf(d, r, psi).exp()).sum();
        prop_assert!((s - 1.0).abs() < 1e-9, "sum {}", s);
    }

    #[test]
    fn observation_pmf_sums_to_one(mu in 0.1..300.0f64, phi in 0.5..60.0f64) {
        let s: f64 = (0..40_000u64).map(|y| nb_mean_phi_logpmf(y, mu, phi).exp()).sum();
        prop_assert!((s - 1.0).abs() < 1e-9, "sum {}", s);
    }

    #[test]
    fn nb_mean_phi_matches_standard_form(y in 0u64..500, mu in 0.1..300.0f64, phi in 0.5..60.0f64) {
        let a = nb_mean_phi_logpmf(y, mu, phi);
        let b = nb_logpmf(y as f64, phi, phi / (phi + mu));
        prop_assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn ode_conserves_population(seed in 0u64..1_000_000, beta in 0.0..3.0f64, nu in 0.0..500.0f64) {
        let theta = theta_from(seed, 4);
        let cfg = FixedConfig::new(4, 1e6);
        let mut o = OdeState::initial(&cfg);
        for _ in 0..150 {
            let (next, inc) = ode_step(o, beta, &theta, &cfg, nu).unwrap();
            prop_assert!(inc >= 0.0);
            prop_assert!(next.s >= 0.0 && next.e1 >= 0.0 && next.e2 >= 0.0 && next.i1 >= 0.0 && next.i2 >= 0.0);
            o = next;
        }
        prop_assert!((o.total() - cfg.n_pop).abs() < 1e-6 * cfg.n_pop);
    }

    #[test]
    fn dic_and_waic_ignore_draw_order(
        rows in prop::collection::vec(prop::collection::vec(-20.0..0.0f64, 8), 1..12),
        perm_seed in any::<u64>(),
        ll_mean in -100.0..0.0f64,
    ) {
        use rand::seq::SliceRandom;
        let n = rows[0].len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut epismc_core::seeded(perm_seed));
        let permuted: Vec<Vec<f64>> = rows.iter().map(|r| order.iter().map(|&j| r[j]).collect()).collect();
        let a = waic(&rows).unwrap();
        let b = waic(&permuted).unwrap();
        prop_assert!((a.waic - b.waic).abs() < 1e-9 * (1.0 + a.waic.abs()));
        let totals: Vec<f64> = (0..n).map(|j| rows.iter().map(|r| r[j]).sum()).collect();
        let ptotals: Vec<f64> = order.iter().map(|&j| totals[j]).collect();
        let da = dic(&totals, ll_mean).unwrap();
        let db = dic(&ptotals, ll_mean).unwrap();
        prop_assert!((da.dic - db.dic).abs() < 1e-9 * (1.0 + da.dic.abs()));
    }

    #[test]
    fn waic_matches_naive_double_loop(rows in prop::collection::vec(prop::collection::vec(-30.0..5.0f64, 2..20), 1..15)) {
        let n = rows.iter().map(|r| r.len()).min().unwrap();
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|r| r[..n].to_vec()).collect();
        let mut lppd = 0.0;
        let mut pen = 0.0;
        for r in &rows {
            let mut acc = 0.0;
            for &x in r {
                acc += x.exp();
            }
            lppd += (acc / n as f64).ln();
            let m = r.iter().sum::<f64>() / n as f64;
            let mut ss = 0.0;
            for &x in r {
                ss += (x - m) * (x - m);
            }
            pen += ss / (n as f64 - 1.0);
        }
        let naive = -2.0 * lppd + 2.0 * pen;
        let w = waic(&rows).unwrap();
        prop_assert!((w.waic - naive).abs() <= 1e-12 * naive.abs().max(1.0), "{} vs {}", w.waic, naive);
    }

    #[test]
    fn clpbf_is_antisymmetric_and_additive(
        a in prop::collection::vec(-10.0..0.0f64, 30),
        b in prop::collection::vec(-10.0..0.0f64, 30),
        t in 5usize..15, u1 in 0usize..8, u2 in 0usize..8,
    ) {
        let sa = PlSeries { label: "a".into(), start: 5, values: a };
        let sb = PlSeries { label: "b".into(), start: 5, values: b };
        let ab = clpbf(&sa, &sb, t, u1 + u2).unwrap();
        let ba = clpbf(&sb, &sa, t, u1 + u2).unwrap();
        prop_assert!((ab + ba).abs() < 1e-12);
        let split = clpbf(&sa, &sb, t, u1).unwrap() + clpbf(&sa, &sb, t + u1, u2).unwrap();
        prop_assert!((ab - split).abs() < 1e-10);
        prop_assert!(clpbf(&sa, &sa, t, u1).unwrap() == 0.0);
    }

    #[test]
    fn sampled_regime_paths_are_feasible(seed in 0u64..1_000_000) {
        let theta = theta_from(seed, 4);
        let cfg = FixedConfig::new(4, 1e6);
        let h = Hsmm::new(&theta, &cfg.init_destinations);
        let mut rng = epismc_core::substream(seed, 1);
        let mut path = vec![h.initial_latent(&mut rng)];
        for _ in 1..120 {
            let z = h.step_latent(*path.last().unwrap(), &mut rng);
            path.push(z);
        }
        prop_assert!(is_feasible(&path, 4));
        prop_assert!(h.log_path(&path).is_finite());
    }

    #[test]
    fn unit_size_durations_reduce_to_geometric_hmm(seed in 0u64..1_000_000) {
        let mut theta = theta_from(seed, 3);
        theta.r.iter_mut().for_each(|r| *r = 1.0);
        let cfg = FixedConfig::new(3, 1e6);
        let h = Hsmm::new(&theta, &cfg.init_destinations);
        let rows = common::adjacent_rows(&theta, &cfg.init_destinations);
        let mut rng = epismc_core::substream(seed, 2);
        let mut path = vec![h.initial_latent(&mut rng)];
        for _ in 1..20 {
            let z = h.step_latent(*path.last().unwrap(), &mut rng);
            path.push(z);
        }
        let oracle = common::geometric_hmm_log_path(&rows, &theta.psi, &path);
        prop_assert!((h.log_path(&path) - oracle).abs() < 1e-10);
    }

    #[test]
    fn prior_gradient_matches_finite_differences(v in prop::collection::vec(-4.0..4.0f64, 24)) {
        let prior = PriorSpec::default_for(4);
        let layout = ParamLayout::new(4, 3);
        let (_, g) = prior.log_prior_unconstrained(&v, layout).unwrap();
        let f = |w: &[f64]| prior.log_prior_unconstrained(w, layout).unwrap().0;
        let h = 1e-5;
        for i in 0..v.len() {
            let mut p = v.clone();
            let mut m = v.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let rel = (fd - g[i]).abs() / g[i].abs().max(1.0);
            prop_assert!(rel < 1e-4, "component {}: analytic {} fd {}", i, g[i], fd);
        }
    }
}
