use chrono::NaiveDate;

use epismc_core::comparison::batch_criteria;
use epismc_core::data_io::default_delay_distribution;
use epismc_core::forecast::{origins_from_chains, origins_from_cloud};
use epismc_core::inference_seq::NutsRejuvenation;
use epismc_core::simulate::default_synthetic_schedules;
use epismc_core::{
    load_dataset, pf_run, predict, run_chains, simulate, smc2_run, substream, Aggregation, ChainConfig, ChainInit,
    FilterConfig, FixedConfig, ModelKind, PGibbsConfig, ParametricModel, PriorSpec, SeirFamily, Smc2Config, ThetaParams,
};

fn synthetic(t_len: usize) -> (SeirFamily, epismc_core::SyntheticDataset) {
    let cfg = FixedConfig::new(4, 1e6);
    let sched = default_synthetic_schedules(default_delay_distribution(cfg.window).unwrap());
    let sim = simulate(&ThetaParams::reference_k4(), &cfg, &sched, t_len, 21).unwrap();
    let family = SeirFamily {
        cfg,
        sched,
        prior: PriorSpec::default_for(4),
        kind: ModelKind::CasesAndDeaths,
    };
    (family, sim)
}

#[test]
fn written_dataset_loads_back_identically() {
    let (family, sim) = synthetic(80);
    let dir = tempfile::tempdir().unwrap();
    let origin = NaiveDate::from_ymd_opt(2020, 3, 1).unwrap();
    sim.write(dir.path(), origin).unwrap();
    let ds = load_dataset(&dir.path().join("dataset.json")).unwrap();
    assert_eq!(ds.observations(), sim.observations());
    let sched = ds.schedules().unwrap();
    assert_eq!(sched.delay, family.sched.delay);
    for t in 0..80 {
        assert_eq!(sched.ifr_at(t), family.sched.ifr_at(t));
        assert_eq!(sched.ur_at(t), family.sched.ur_at(t));
        assert_eq!(sched.nu_lagged(t, 45), family.sched.nu_lagged(t, 45));
    }
}

#[test]
fn filter_prefers_generating_parameters_over_a_distant_value() {
    let (family, sim) = synthetic(80);
    let data = sim.observations();
    let fcfg = FilterConfig::new(256);
    let truth = pf_run(&family.model(&sim.theta_true), &data, &fcfg, &mut substream(3, 0)).unwrap().1;
    let mut off = sim.theta_true.clone();
    off.log_beta.iter_mut().for_each(|b| *b += 0.5);
    let far = pf_run(&family.model(&off), &data, &fcfg, &mut substream(3, 1)).unwrap().1;
    assert!(truth.is_finite());
    assert!(truth > far, "{truth} <= {far}");
}

#[test]
fn short_batch_fit_feeds_criteria_and_forecasts() {
    let (family, sim) = synthetic(50);
    let data = sim.observations();
    let cc = ChainConfig {
        n_chains: 2,
        n_iters: 16,
        n_burnin: 8,
        init: ChainInit::Supplied(sim.theta_true.clone()),
        seed: 5,
        pg: PGibbsConfig {
            filter: FilterConfig::new(32),
            ..PGibbsConfig::default()
        },
    };
    let chains = run_chains(&family, &data, &cc).unwrap();
    assert_eq!(chains.len(), 2);
    for c in &chains {
        assert_eq!(c.len(), 16);
        assert!(c.log_posterior.iter().all(|v| v.is_finite()));
        assert!(c.trajectories.iter().all(|z| z.len() == data.len()));
    }
    let again = run_chains(&family, &data, &cc).unwrap();
    assert_eq!(chains, again);

    let (d, w) = batch_criteria(&family, &data, &chains, 2, &FilterConfig::new(64), 9).unwrap();
    assert!(d.dic.is_finite() && d.p_dic >= 0.0);
    assert!(w.waic.is_finite() && w.p_waic >= 0.0);

    let origins = origins_from_chains(&family, &chains).unwrap();
    assert_eq!(origins.len(), 16);
    let fc = predict(&family, &origins, data.len() - 1, 2, Aggregation::Weekly, 200, &mut substream(1, 1)).unwrap();
    assert_eq!(fc.cases.len(), 2);
    for s in &fc.summary {
        assert!(s.quantiles[0] <= s.quantiles[1] && s.quantiles[1] <= s.quantiles[2]);
    }
}

#[test]
fn sequential_fit_produces_one_record_per_day() {
    let (family, sim) = synthetic(45);
    let data = sim.observations();
    let cfg = Smc2Config::new(8, 32, 35);
    let rej = NutsRejuvenation {
        tune_iters: 5,
        max_depth: 5,
        ..NutsRejuvenation::default()
    };
    let cloud = smc2_run(&family, rej, &data, cfg, 2).unwrap();
    assert_eq!(cloud.records.len(), data.len() - 35);
    assert!(cloud.records.iter().all(|r| r.log_pl.is_finite() && r.log_pl_pred.is_finite()));
    let total: f64 = cloud.records.iter().map(|r| r.log_pl).sum();
    assert!((total - cloud.cum_log_pl).abs() < 1e-9);
    let origins = origins_from_cloud(&cloud, &mut substream(4, 0)).unwrap();
    assert!(!origins.is_empty());
}
