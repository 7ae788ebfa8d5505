//! Predictive simulation of reported cases and deaths from a fitted
//! posterior representation.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::quantiles;
use crate::dist::sample_nb;
use crate::dynamics::AugmentedState;
use crate::error::{Error, Result};
use crate::filters::{categorical, normalise, ParticleCloud, StateSpace};
use crate::inference_batch::ChainOutput;
use crate::inference_seq::ThetaCloud;
use crate::model::{ParametricModel, SeirFamily};
use crate::observation::{expected_cases, expected_deaths};
use crate::params::ThetaParams;
use crate::rng::{fork_key, substream, SimRng};

/// Quantile levels reported per horizon.
pub const FORECAST_LEVELS: [f64; 3] = [0.025, 0.5, 0.975];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Daily,
    /// Sums of 7 consecutive predicted days.
    Weekly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Cases,
    Deaths,
}

impl Channel {
    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Cases => "cases",
            Channel::Deaths => "deaths",
        }
    }
}

/// One weighted starting point for a rollout: a parameter value with a
/// state filtered (or smoothed) up to the forecast origin.
#[derive(Debug, Clone)]
pub struct Origin {
    pub theta: ThetaParams,
    pub state: AugmentedState,
    pub weight: f64,
}

/// Origins from an SMC² population: one inner particle per parameter
/// particle, chosen by inner weight, carrying the outer weight.
pub fn origins_from_cloud(
    cloud: &ThetaCloud<ThetaParams, AugmentedState>,
    rng: &mut SimRng,
) -> Result<Vec<Origin>> {
    let w = cloud.normalised_weights().ok_or(Error::Degeneracy { t: cloud.t_next })?;
    let mut out = Vec::with_capacity(cloud.len());
    for (n, f) in cloud.filters.iter().enumerate() {
        if w[n] == 0.0 {
            continue;
        }
        if let Some(iw) = f.normalised_weights() {
            let k = categorical(&iw, rng);
            out.push(Origin {
                theta: cloud.thetas[n].clone(),
                state: f.particles[k].clone(),
                weight: w[n],
            });
        }
    }
    Ok(out)
}

/// Origins from a single filter run at a fixed θ: every particle with its weight.
pub fn origins_from_filter(theta: &ThetaParams, cloud: &ParticleCloud<AugmentedState>) -> Result<Vec<Origin>> {
    let w = cloud
        .normalised_weights()
        .ok_or(Error::Degeneracy { t: cloud.steps() })?;
    Ok(cloud
        .particles
        .iter()
        .zip(w)
        .map(|(x, weight)| Origin {
            theta: theta.clone(),
            state: x.clone(),
            weight,
        })
        .collect())
}

/// Origins from retained Particle Gibbs draws: the state at the end of
/// each sampled trajectory, equally weighted.
pub fn origins_from_chains(family: &SeirFamily, chains: &[ChainOutput]) -> Result<Vec<Origin>> {
    let mut out = vec![];
    for c in chains {
        for i in c.retained() {
            let theta = &c.theta[i];
            let model = family.model(theta);
            let states = model.states_along(&c.trajectories[i])?;
            if let Some(last) = states.last() {
                out.push(Origin {
                    theta: theta.clone(),
                    state: last.clone(),
                    weight: 1.0,
                });
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Precondition("no retained draws to forecast from".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSummary {
    /// Model day of the target (last day of the week when weekly).
    pub t: usize,
    /// 1-based step (day or week) ahead.
    pub horizon: usize,
    pub channel: Channel,
    pub quantiles: [f64; 3],
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    /// Last observed model day.
    pub origin_t: usize,
    pub aggregation: Aggregation,
    /// `[horizon][draw]` predicted reported cases.
    pub cases: Vec<Vec<u64>>,
    pub deaths: Vec<Vec<u64>>,
    pub summary: Vec<ForecastSummary>,
}

fn nb_draw<R: Rng + ?Sized>(mu: f64, phi: f64, rng: &mut R) -> u64 {
    if !(mu > 0.0) {
        return 0;
    }
    sample_nb(phi, phi / (phi + mu), rng)
}

/// One rollout of `days` days after `origin_t`.
fn rollout(family: &SeirFamily, o: &Origin, origin_t: usize, days: usize, rng: &mut SimRng) -> Result<(Vec<u64>, Vec<u64>)> {
    let model = family.model(&o.theta);
    let mut x = o.state.clone();
    let mut c = Vec::with_capacity(days);
    let mut d = Vec::with_capacity(days);
    for h in 1..=days {
        let t = origin_t + h;
        let z = model.sample_latent(x.z, rng);
        x = model.apply(&x, z, t)?;
        c.push(nb_draw(expected_cases(&x, &family.sched, t), o.theta.phi_cases, rng));
        d.push(nb_draw(expected_deaths(&x, &family.sched, t), o.theta.phi_deaths, rng));
    }
    Ok((c, d))
}

fn summarise(draws: &[u64]) -> ([f64; 3], f64) {
    let xs: Vec<f64> = draws.iter().map(|&v| v as f64).collect();
    let q = quantiles(&xs, &FORECAST_LEVELS);
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    ([q[0], q[1], q[2]], mean)
}

/// Sums consecutive blocks of 7 days; a trailing partial week is dropped.
pub fn weekly_sums(daily: &[Vec<u64>]) -> Vec<Vec<u64>> {
    let weeks = daily.len() / 7;
    (0..weeks)
        .map(|w| {
            let n = daily[7 * w].len();
            (0..n).map(|j| (0..7).map(|d| daily[7 * w + d][j]).sum()).collect()
        })
        .collect()
}

/// Predictive draws and summaries for `horizon` steps after `origin_t`.
///
/// Daily: `horizon` days. Weekly: `horizon` weeks of 7-day sums.
/// Origins are resampled by weight to `n_draws` rollouts.
pub fn predict(
    family: &SeirFamily,
    origins: &[Origin],
    origin_t: usize,
    horizon: usize,
    aggregation: Aggregation,
    n_draws: usize,
    rng: &mut SimRng,
) -> Result<ForecastResult> {
    let empty = ForecastResult {
        origin_t,
        aggregation,
        cases: vec![],
        deaths: vec![],
        summary: vec![],
    };
    if horizon == 0 || n_draws == 0 {
        return Ok(empty);
    }
    let lw: Vec<f64> = origins.iter().map(|o| o.weight.ln()).collect();
    let w = normalise(&lw).ok_or_else(|| Error::Precondition("origins carry no weight".into()))?;
    let days = match aggregation {
        Aggregation::Daily => horizon,
        Aggregation::Weekly => 7 * horizon,
    };
    let key = fork_key(rng);
    let runs: Vec<(Vec<u64>, Vec<u64>)> = (0..n_draws)
        .into_par_iter()
        .map(|j| {
            let mut r = substream(key, j as u64);
            let o = &origins[categorical(&w, &mut r)];
            rollout(family, o, origin_t, days, &mut r)
        })
        .collect::<Result<_>>()?;
    let transpose = |ch: usize| -> Vec<Vec<u64>> {
        (0..days)
            .map(|h| runs.iter().map(|r| if ch == 0 { r.0[h] } else { r.1[h] }).collect())
            .collect()
    };
    let (cases, deaths) = match aggregation {
        Aggregation::Daily => (transpose(0), transpose(1)),
        Aggregation::Weekly => (weekly_sums(&transpose(0)), weekly_sums(&transpose(1))),
    };
    let step = if aggregation == Aggregation::Weekly { 7 } else { 1 };
    let mut summary = vec![];
    for h in 0..horizon {
        for (ch, draws) in [(Channel::Cases, &cases[h]), (Channel::Deaths, &deaths[h])] {
            let (q, mean) = summarise(draws);
            summary.push(ForecastSummary {
                t: origin_t + step * (h + 1),
                horizon: h + 1,
                channel: ch,
                quantiles: q,
                mean,
            });
        }
    }
    Ok(ForecastResult {
        origin_t,
        aggregation,
        cases,
        deaths,
        summary,
    })
}

pub fn write_forecast_csv<W: std::io::Write>(results: &[ForecastResult], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["t", "horizon", "channel", "q2.5", "q50", "q97.5", "mean"])?;
    for r in results {
        for s in &r.summary {
            wr.write_record([
                s.t.to_string(),
                s.horizon.to_string(),
                s.channel.as_str().to_string(),
                format!("{}", s.quantiles[0]),
                format!("{}", s.quantiles[1]),
                format!("{}", s.quantiles[2]),
                format!("{:.6}", s.mean),
            ])?;
        }
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::default_delay_distribution;
    use crate::dynamics::OdeState;
    use crate::hsmm::LatentState;
    use crate::observation::ModelKind;
    use crate::params::{FixedConfig, PriorSpec};
    use crate::rng::seeded;
    use crate::simulate::default_synthetic_schedules;

    fn family() -> SeirFamily {
        SeirFamily {
            cfg: FixedConfig::new(4, 1.0e6),
            sched: default_synthetic_schedules(default_delay_distribution(28).unwrap()),
            prior: PriorSpec::default_for(4),
            kind: ModelKind::CasesAndDeaths,
        }
    }

    #[test]
    fn zero_horizon_is_empty() {
        let f = family();
        let o = Origin {
            theta: ThetaParams::reference_k4(),
            state: AugmentedState::initial(&f.cfg),
            weight: 1.0,
        };
        let r = predict(&f, &[o], 10, 0, Aggregation::Daily, 50, &mut seeded(1)).unwrap();
        assert!(r.summary.is_empty() && r.cases.is_empty());
    }

    #[test]
    fn infection_free_state_predicts_zeros() {
        let f = family();
        let mut state = AugmentedState::initial(&f.cfg);
        state.ode = OdeState {
            s: 1.0e6,
            e1: 0.0,
            e2: 0.0,
            i1: 0.0,
            i2: 0.0,
            r: 0.0,
        };
        state.z = LatentState::new(1, 3);
        let o = Origin {
            theta: ThetaParams::reference_k4(),
            state,
            weight: 1.0,
        };
        let r = predict(&f, &[o], 5, 14, Aggregation::Daily, 40, &mut seeded(2)).unwrap();
        assert!(r.cases.iter().flatten().chain(r.deaths.iter().flatten()).all(|&v| v == 0));
    }

    #[test]
    fn weekly_is_sum_then_quantile() {
        // skewed draws: the week's quantile differs from the sum of daily quantiles
        let daily: Vec<Vec<u64>> = (0..7)
            .map(|d| (0..100u64).map(|j| if (j + d) % 10 == 0 { 1000 } else { j % 3 }).collect())
            .collect();
        let w = weekly_sums(&daily);
        assert_eq!(w.len(), 1);
        for j in 0..100 {
            assert_eq!(w[0][j], (0..7).map(|d| daily[d][j]).sum::<u64>());
        }
        let (qw, _) = summarise(&w[0]);
        let q_sum: f64 = daily.iter().map(|d| summarise(d).0[2]).sum();
        assert!(qw[2] != q_sum);
    }

    #[test]
    fn quantiles_are_monotone_and_permutation_invariant() {
        let f = family();
        let th = ThetaParams::reference_k4();
        let model = f.model(&th);
        let mut x = AugmentedState::initial(&f.cfg);
        let mut rng = seeded(4);
        let mut origins = vec![];
        for t in 0..30 {
            let z = if t == 0 { model.sample_initial_latent(&mut rng) } else { model.sample_latent(x.z, &mut rng) };
            x = model.apply(&x, z, t).unwrap();
        }
        for _ in 0..4 {
            origins.push(Origin {
                theta: th.clone(),
                state: x.clone(),
                weight: 1.0,
            });
        }
        let a = predict(&f, &origins, 29, 3, Aggregation::Weekly, 200, &mut seeded(8)).unwrap();
        for s in &a.summary {
            assert!(s.quantiles[0] <= s.quantiles[1] && s.quantiles[1] <= s.quantiles[2]);
        }
        origins.reverse();
        let b = predict(&f, &origins, 29, 3, Aggregation::Weekly, 200, &mut seeded(8)).unwrap();
        assert_eq!(a.summary, b.summary);
    }
}
