//! Bindings of the epidemic model (and the toy grid model) to the generic
//! filtering interface.

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dynamics::{advance_with, AugmentedState, OdeRates, Schedules};
use crate::error::Result;
use crate::filters::StateSpace;
use crate::hsmm::{Hsmm, LatentState};
use crate::observation::{log_obs, ModelKind, Observation};
use crate::params::{FixedConfig, PriorSpec, ThetaParams};
use crate::toy::{ToyGrid, ToyModel, ToyObs};

/// The epidemic state-space model at one parameter value.
#[derive(Debug, Clone)]
pub struct SeirModel<'a> {
    pub theta: ThetaParams,
    pub cfg: &'a FixedConfig,
    pub sched: &'a Schedules,
    pub kind: ModelKind,
    pub hsmm: Hsmm,
    rates: OdeRates,
}

impl<'a> SeirModel<'a> {
    pub fn new(theta: ThetaParams, cfg: &'a FixedConfig, sched: &'a Schedules, kind: ModelKind) -> Self {
        let hsmm = Hsmm::new(&theta, &cfg.init_destinations);
        let rates = OdeRates::new(&theta, cfg);
        Self {
            theta,
            cfg,
            sched,
            kind,
            hsmm,
            rates,
        }
    }

    /// Deterministic state path along a latent path.
    pub fn states_along(&self, path: &[LatentState]) -> Result<Vec<AugmentedState>> {
        let mut x = self.initial_state();
        let mut out = Vec::with_capacity(path.len());
        for (t, z) in path.iter().enumerate() {
            x = self.apply(&x, *z, t)?;
            out.push(x.clone());
        }
        Ok(out)
    }
}

impl StateSpace for SeirModel<'_> {
    type State = AugmentedState;
    type Obs = Observation;

    fn initial_state(&self) -> AugmentedState {
        AugmentedState::initial(self.cfg)
    }

    fn sample_initial_latent<R: Rng + ?Sized>(&self, rng: &mut R) -> LatentState {
        self.hsmm.initial_latent(rng)
    }

    fn sample_latent<R: Rng + ?Sized>(&self, prev: LatentState, rng: &mut R) -> LatentState {
        self.hsmm.step_latent(prev, rng)
    }

    fn log_initial_latent(&self, z: LatentState) -> f64 {
        self.hsmm.log_initial(z)
    }

    fn log_latent_transition(&self, z_new: LatentState, z_prev: LatentState) -> f64 {
        self.hsmm.log_transition(z_new, z_prev)
    }

    fn apply(&self, x: &AugmentedState, z: LatentState, t: usize) -> Result<AugmentedState> {
        advance_with(x, z, &self.rates, &self.theta, self.cfg, self.sched, t)
    }

    fn log_obs(&self, x: &AugmentedState, obs: &Observation, _t: usize) -> f64 {
        log_obs(obs, x, &self.theta, self.sched, self.kind)
    }

    fn latent(&self, x: &AugmentedState) -> LatentState {
        x.z
    }
}

/// A family of state-space models indexed by a static parameter.
pub trait ParametricModel: Sync {
    type Theta: Clone + Send + Sync + std::fmt::Debug + Serialize + DeserializeOwned;
    type State: Clone + Send + Sync + Serialize + DeserializeOwned;
    type Obs: Sync;
    type Model<'a>: StateSpace<State = Self::State, Obs = Self::Obs>
    where
        Self: 'a;

    fn model<'a>(&'a self, theta: &Self::Theta) -> Self::Model<'a>;
    fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Self::Theta;
}

/// Everything fixed about an epidemic fit except θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeirFamily {
    pub cfg: FixedConfig,
    pub sched: Schedules,
    pub prior: PriorSpec,
    pub kind: ModelKind,
}

impl ParametricModel for SeirFamily {
    type Theta = ThetaParams;
    type State = AugmentedState;
    type Obs = Observation;
    type Model<'a> = SeirModel<'a>;

    fn model<'a>(&'a self, theta: &ThetaParams) -> SeirModel<'a> {
        SeirModel::new(theta.clone(), &self.cfg, &self.sched, self.kind)
    }

    fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> ThetaParams {
        self.prior.sample(self.cfg.layout(), rng)
    }
}

impl ParametricModel for ToyGrid {
    type Theta = usize;
    type State = LatentState;
    type Obs = ToyObs;
    type Model<'a> = ToyModel;

    fn model<'a>(&'a self, theta: &usize) -> ToyModel {
        self.model_at(*theta)
    }

    fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        crate::filters::categorical(&self.prior, rng)
    }
}
