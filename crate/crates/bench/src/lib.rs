//! Shared fixtures for the benchmarks.

use epismc_core::data_io::default_delay_distribution;
use epismc_core::simulate::default_synthetic_schedules;
use epismc_core::{simulate, FixedConfig, LatentState, ModelKind, Observation, PriorSpec, SeirFamily, ThetaParams};

/// A four-regime family with `t_len` simulated days, and the true latent path.
pub fn fixture(t_len: usize) -> (SeirFamily, Vec<Observation>, Vec<LatentState>) {
    let cfg = FixedConfig::new(4, 1.0e6);
    let sched = default_synthetic_schedules(default_delay_distribution(cfg.window).expect("window >= 2"));
    let d = simulate(&ThetaParams::reference_k4(), &cfg, &sched, t_len, 11).expect("simulation");
    let obs = d.observations();
    let family = SeirFamily {
        cfg,
        sched,
        prior: PriorSpec::default_for(4),
        kind: ModelKind::CasesAndDeaths,
    };
    (family, obs, d.latent)
}
