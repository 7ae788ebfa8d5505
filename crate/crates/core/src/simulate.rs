//! Forward simulation of synthetic datasets from the full generative model.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::dist::sample_nb;
use crate::dynamics::{AugmentedState, DelayDistribution, IfrSchedule, OdeState, Schedules};
use crate::data_io::{Dataset, IfrDates};
use crate::error::{Error, Result};
use crate::filters::StateSpace;
use crate::hsmm::LatentState;
use crate::model::SeirModel;
use crate::observation::{expected_cases, expected_deaths, ModelKind, Observation};
use crate::params::{FixedConfig, ThetaParams};
use crate::rng::{seeded, SimRng};

/// A simulated dataset with every intermediate truth retained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub theta_true: ThetaParams,
    pub cfg: FixedConfig,
    pub latent: Vec<LatentState>,
    pub ode: Vec<OdeState>,
    pub implied_cases: Vec<f64>,
    pub implied_deaths: Vec<f64>,
    pub cases: Vec<u64>,
    pub deaths: Vec<u64>,
    pub schedules: Schedules,
    pub seed: u64,
}

/// ν ≡ 0, ur ≡ 1, constant IFR 0.005 and the given delay.
pub fn default_synthetic_schedules(delay: DelayDistribution) -> Schedules {
    Schedules {
        nu: vec![],
        ifr: IfrSchedule::constant(0.005),
        ur: vec![],
        delay,
    }
}

fn nb_draw(mu: f64, phi: f64, rng: &mut SimRng) -> u64 {
    if !(mu > 0.0) {
        return 0;
    }
    sample_nb(phi, phi / (phi + mu), rng)
}

/// Simulates `t_len` days; the result depends only on the arguments.
pub fn simulate(theta: &ThetaParams, cfg: &FixedConfig, sched: &Schedules, t_len: usize, seed: u64) -> Result<SyntheticDataset> {
    if t_len < 1 {
        return Err(Error::Precondition("T must be at least 1".into()));
    }
    theta.validate()?;
    cfg.validate()?;
    sched.validate()?;
    if theta.log_beta.len() != cfg.k {
        return Err(Error::Shape {
            what: "log_beta".into(),
            expected: cfg.k,
            got: theta.log_beta.len(),
        });
    }
    let mut rng = seeded(seed);
    let model = SeirModel::new(theta.clone(), cfg, sched, ModelKind::CasesAndDeaths);
    let mut x: AugmentedState = model.initial_state();
    let mut out = SyntheticDataset {
        theta_true: theta.clone(),
        cfg: cfg.clone(),
        latent: Vec::with_capacity(t_len),
        ode: Vec::with_capacity(t_len),
        implied_cases: Vec::with_capacity(t_len),
        implied_deaths: Vec::with_capacity(t_len),
        cases: Vec::with_capacity(t_len),
        deaths: Vec::with_capacity(t_len),
        schedules: sched.clone(),
        seed,
    };
    for t in 0..t_len {
        let z = if t == 0 {
            model.sample_initial_latent(&mut rng)
        } else {
            model.sample_latent(x.z, &mut rng)
        };
        x = model.apply(&x, z, t)?;
        let ci = x.latest_incidence();
        let di = expected_deaths(&x, sched, t);
        let mc = expected_cases(&x, sched, t);
        out.latent.push(z);
        out.ode.push(x.ode);
        out.implied_cases.push(ci);
        out.implied_deaths.push(di);
        out.cases.push(nb_draw(mc, theta.phi_cases, &mut rng));
        out.deaths.push(nb_draw(di, theta.phi_deaths, &mut rng));
    }
    Ok(out)
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn observations(&self) -> Vec<Observation> {
        (0..self.len())
            .map(|t| Observation {
                t,
                cases: Some(self.cases[t]),
                deaths: Some(self.deaths[t]),
            })
            .collect()
    }

    pub fn distinct_regimes(&self) -> usize {
        let mut seen: Vec<usize> = self.latent.iter().map(|z| z.s).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }

    /// The dataset in the loader's representation, starting on `origin`.
    ///
    /// The start threshold and death lead-in are both zero so that the
    /// loaded model days coincide with the simulated ones. Schedules must
    /// be constant or explicit per-day series; the IFR is written as a
    /// change-point list relative to `origin`.
    pub fn to_dataset(&self, origin: NaiveDate) -> Dataset {
        let n = self.len();
        let ifr = IfrDates {
            dates: self
                .schedules
                .ifr
                .change_days
                .iter()
                .map(|&d| origin + chrono::Days::new(d as u64))
                .collect(),
            values: self.schedules.ifr.values.clone(),
        };
        let held = |v: &[f64], default: f64| -> Vec<f64> {
            (0..n)
                .map(|t| match v.len() {
                    0 => default,
                    m => v[t.min(m - 1)],
                })
                .collect()
        };
        Dataset {
            dates: (0..n).map(|i| origin + chrono::Days::new(i as u64)).collect(),
            cases: self.cases.iter().map(|&c| Some(c)).collect(),
            deaths: self.deaths.iter().map(|&d| Some(d)).collect(),
            vaccinations: held(&self.schedules.nu, 0.0),
            under_reporting: if self.schedules.ur.is_empty() {
                vec![]
            } else {
                held(&self.schedules.ur, 1.0)
            },
            delay: self.schedules.delay.clone(),
            ifr,
            start: 0,
            start_min_deaths: 0,
            death_lead_in: 0,
            window: self.cfg.window,
        }
    }

    /// Writes the loader-compatible files plus `truth.json` and `latent.csv`.
    pub fn write(&self, dir: &std::path::Path, origin: NaiveDate) -> Result<()> {
        self.to_dataset(origin).write(dir)?;
        std::fs::write(dir.join("truth.json"), serde_json::to_string_pretty(self)? + "\n")?;
        let mut w = csv::Writer::from_path(dir.join("latent.csv"))?;
        w.write_record(["t", "regime", "duration", "implied_cases", "implied_deaths"])?;
        for t in 0..self.len() {
            w.write_record([
                t.to_string(),
                self.latent[t].s.to_string(),
                self.latent[t].d.to_string(),
                self.implied_cases[t].to_string(),
                self.implied_deaths[t].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
