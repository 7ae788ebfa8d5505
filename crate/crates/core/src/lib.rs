//! Regime-switching SEIR state-space models for epidemic surveillance data.
//!
//! Transmission is piecewise constant across the regimes of a hidden
//! semi-Markov chain. The crate provides particle filters, Particle Gibbs
//! with NUTS parameter moves, SMC² for sequential fitting, predictive
//! simulation and model comparison criteria.

pub mod comparison;
pub mod data_io;
pub mod diagnostics;
pub mod dist;
pub mod dynamics;
pub mod error;
pub mod filters;
pub mod forecast;
pub mod hsmm;
pub mod inference_batch;
pub mod inference_seq;
pub mod model;
pub mod nuts;
pub mod observation;
pub mod params;
pub mod rng;
pub mod serde_util;
pub mod simulate;
pub mod toy;

pub use comparison::{clpbf, dic, waic, CriterionReport, PlSeries};
pub use data_io::{load_dataset, Dataset, DatasetConfig};
pub use dynamics::{AugmentedState, DelayDistribution, IfrSchedule, OdeState, Schedules};
pub use error::{Error, Result};
pub use filters::{conditional_pf, pf_run, FilterConfig, ParticleCloud, Resampler, StateSpace};
pub use forecast::{predict, Aggregation, ForecastResult};
pub use hsmm::{Hsmm, LatentState};
pub use inference_batch::{run_chains, ChainConfig, ChainInit, ChainOutput, GradientMode, PGibbsConfig};
pub use inference_seq::{smc2_run, Smc2, Smc2Config, ThetaCloud};
pub use model::{ParametricModel, SeirFamily, SeirModel};
pub use observation::{ModelKind, Observation};
pub use params::{FixedConfig, ParamLayout, PriorSpec, ThetaParams};
pub use rng::{seeded, substream, SimRng};
pub use simulate::{simulate, SyntheticDataset};
