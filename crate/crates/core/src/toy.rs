//! Small semi-Markov models with Gaussian emissions and identity dynamics.
//!
//! Durations have finite support `0..=d_max`, so the pair chain `(s, d)` is
//! finite and exact likelihoods are available by enumeration. These models
//! exercise the filters and SMC² machinery against closed-form answers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{categorical, StateSpace};
use crate::hsmm::LatentState;

/// One possibly missing scalar observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyObs(pub Option<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    /// Emission mean per regime.
    pub means: Vec<f64>,
    pub sigma: f64,
    /// Successor probabilities at renewal.
    pub trans: Vec<Vec<f64>>,
    /// Initial regime probabilities.
    pub init: Vec<f64>,
    /// Remaining-duration pmf per regime over `0..=d_max`.
    pub durations: Vec<Vec<f64>>,
}

fn truncated_nb(r: f64, psi: f64, d_max: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..=d_max)
        .map(|d| crate::dist::nb_logpmf(d as f64, r, psi).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

impl ToyModel {
    /// Two alternating regimes, durations truncated at 8.
    pub fn two_regime() -> Self {
        Self {
            means: vec![0.0, 2.0],
            sigma: 1.0,
            trans: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            init: vec![0.5, 0.5],
            durations: vec![truncated_nb(3.0, 0.5, 8), truncated_nb(2.0, 0.4, 8)],
        }
    }

    /// A single regime that renews into itself.
    pub fn one_regime() -> Self {
        Self {
            means: vec![0.0],
            sigma: 1.0,
            trans: vec![vec![1.0]],
            init: vec![1.0],
            durations: vec![truncated_nb(2.0, 0.5, 8)],
        }
    }

    pub fn k(&self) -> usize {
        self.means.len()
    }

    pub fn d_max(&self) -> usize {
        self.durations[0].len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        let ok_pv = |v: &[f64]| (v.iter().sum::<f64>() - 1.0).abs() < 1e-10 && v.iter().all(|&x| x >= 0.0);
        if self.trans.len() != k || self.trans.iter().any(|r| r.len() != k || !ok_pv(r)) {
            return Err(Error::Validation("toy transition rows".into()));
        }
        if self.init.len() != k || !ok_pv(&self.init) {
            return Err(Error::Validation("toy initial distribution".into()));
        }
        if self.durations.len() != k || self.durations.iter().any(|d| !ok_pv(d)) {
            return Err(Error::Validation("toy durations".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Validation("toy sigma".into()));
        }
        Ok(())
    }

    fn log_dur(&self, s: usize, d: u32) -> f64 {
        self.durations[s].get(d as usize).map_or(f64::NEG_INFINITY, |p| p.ln())
    }

    pub fn emission_logpdf(&self, y: f64, s: usize) -> f64 {
        let z = (y - self.means[s]) / self.sigma;
        -0.5 * z * z - self.sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }

    /// Draws a latent path and its observations.
    pub fn simulate<R: Rng + ?Sized>(&self, t_len: usize, rng: &mut R) -> (Vec<LatentState>, Vec<f64>) {
        let mut path = Vec::with_capacity(t_len);
        let mut ys = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let z = if t == 0 {
                self.sample_initial_latent(rng)
            } else {
                self.sample_latent(path[t - 1], rng)
            };
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            ys.push(self.means[z.s] + self.sigma * e);
            path.push(z);
        }
        (path, ys)
    }
}

impl StateSpace for ToyModel {
    type State = LatentState;
    type Obs = ToyObs;

    fn initial_state(&self) -> LatentState {
        LatentState::new(0, 0)
    }

    fn sample_initial_latent<R: Rng + ?Sized>(&self, rng: &mut R) -> LatentState {
        let s = categorical(&self.init, rng);
        LatentState::new(s, categorical(&self.durations[s], rng) as u32)
    }

    fn sample_latent<R: Rng + ?Sized>(&self, prev: LatentState, rng: &mut R) -> LatentState {
        if prev.d > 0 {
            return LatentState::new(prev.s, prev.d - 1);
        }
        let s = categorical(&self.trans[prev.s], rng);
        LatentState::new(s, categorical(&self.durations[s], rng) as u32)
    }

    fn log_initial_latent(&self, z: LatentState) -> f64 {
        if z.s >= self.k() {
            return f64::NEG_INFINITY;
        }
        self.init[z.s].ln() + self.log_dur(z.s, z.d)
    }

    fn log_latent_transition(&self, z_new: LatentState, z_prev: LatentState) -> f64 {
        if z_new.s >= self.k() {
            return f64::NEG_INFINITY;
        }
        if z_prev.d > 0 {
            if z_new.s == z_prev.s && z_new.d + 1 == z_prev.d {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        } else {
            self.trans[z_prev.s][z_new.s].ln() + self.log_dur(z_new.s, z_new.d)
        }
    }

    fn apply(&self, _x: &LatentState, z: LatentState, _t: usize) -> Result<LatentState> {
        Ok(z)
    }

    fn log_obs(&self, x: &LatentState, obs: &ToyObs, _t: usize) -> f64 {
        match obs.0 {
            Some(y) => self.emission_logpdf(y, x.s),
            None => 0.0,
        }
    }

    fn latent(&self, x: &LatentState) -> LatentState {
        *x
    }
}

/// Toy family whose only unknown is the emission mean of the last regime,
/// restricted to a finite grid with prior weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyGrid {
    pub base: ToyModel,
    pub grid: Vec<f64>,
    pub prior: Vec<f64>,
}

impl ToyGrid {
    /// The two-regime model with the upper mean in {0.5, 1.5, 3.0}, uniform prior.
    pub fn three_point() -> Self {
        Self {
            base: ToyModel::two_regime(),
            grid: vec![0.5, 1.5, 3.0],
            prior: vec![1.0 / 3.0; 3],
        }
    }

    pub fn model_at(&self, i: usize) -> ToyModel {
        let mut m = self.base.clone();
        let last = m.means.len() - 1;
        m.means[last] = self.grid[i];
        m
    }

    /// Exact-conditional draw of the grid index given a latent path.
    pub fn gibbs_index<R: Rng + ?Sized>(&self, path: &[LatentState], data: &[ToyObs], rng: &mut R) -> usize {
        let lw: Vec<f64> = (0..self.grid.len())
            .map(|i| {
                let m = self.model_at(i);
                let ll: f64 = path.iter().zip(data).map(|(z, o)| m.log_obs(z, o, 0)).sum();
                self.prior[i].ln() + ll
            })
            .collect();
        let w = crate::filters::normalise(&lw).expect("grid posterior has finite mass");
        categorical(&w, rng)
    }
}
