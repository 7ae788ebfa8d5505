//! SMC² over static parameters: each parameter particle carries its own
//! particle filter, outer weights are updated by the inner filters'
//! likelihood increments, and low outer ESS triggers resampling followed by
//! a Particle Gibbs rejuvenation of every particle.
//!
//! After rejuvenation the particle system produced by the conditional
//! filter is kept as the particle's filter. Together with θ it is a draw
//! from the extended target of the sampler, so filtering simply continues
//! from it at the next observation.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dist::log_sum_exp;
use crate::error::{Error, Result};
use crate::filters::{categorical, conditional_pf, ess, normalise, pf_run, FilterConfig, ParticleCloud, Resampler, StateSpace};
use crate::hsmm::LatentState;
use crate::inference_batch::{ConditionalTarget, GradientMode};
use crate::model::{ParametricModel, SeirFamily};
use crate::nuts::{AdaptiveNuts, Metric, Nuts};
use crate::params::ThetaParams;
use crate::rng::{fork_key, substream, SimRng};
use crate::toy::ToyGrid;

/// Checkpoint format version written by this build.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Smc2Config {
    /// Parameter particles.
    pub n: usize,
    /// Inner filter settings (particle count M, inner resampling).
    pub filter: FilterConfig,
    /// Number of leading observations used for initialisation.
    pub t0: usize,
    /// Outer resampling triggers when ESS falls below this fraction of N.
    pub resample_threshold: f64,
    /// Particle Gibbs sweeps per rejuvenation.
    pub sweeps: usize,
    pub outer_resampler: Resampler,
}

impl Smc2Config {
    pub fn new(n: usize, m: usize, t0: usize) -> Self {
        Self {
            n,
            filter: FilterConfig::new(m),
            t0,
            resample_threshold: 0.5,
            sweeps: 1,
            outer_resampler: Resampler::Multinomial,
        }
    }

    pub fn validate(&self, t_len: usize) -> Result<()> {
        self.filter.validate()?;
        if self.n < 1 {
            return Err(Error::Precondition("need at least one parameter particle".into()));
        }
        if self.t0 < 1 || self.t0 >= t_len {
            return Err(Error::Precondition(format!("t0 must lie in [1, T), got {} with T = {t_len}", self.t0)));
        }
        if !(self.resample_threshold > 0.0 && self.resample_threshold <= 1.0) {
            return Err(Error::Precondition("resample_threshold must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Outer population: parameter particles, their filters and weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaCloud<Th, S> {
    pub thetas: Vec<Th>,
    pub filters: Vec<ParticleCloud<S>>,
    #[serde(with = "crate::serde_util::vec_f64")]
    pub log_weights: Vec<f64>,
    pub records: Vec<PlRecord>,
    #[serde(with = "crate::serde_util::f64_any")]
    pub cum_log_pl: f64,
    #[serde(with = "crate::serde_util::f64_any")]
    pub cum_log_pl_pred: f64,
    /// Index of the next observation to assimilate.
    pub t_next: usize,
}

impl<Th, S> ThetaCloud<Th, S> {
    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    pub fn normalised_weights(&self) -> Option<Vec<f64>> {
        normalise(&self.log_weights)
    }

    pub fn ess(&self) -> f64 {
        ess(&self.log_weights)
    }
}

/// What happened at one assimilation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlRecord {
    pub t: usize,
    /// log L̂_t from the filters' likelihood increments.
    #[serde(with = "crate::serde_util::f64_any")]
    pub log_pl: f64,
    /// log of the prediction-step estimate (one predicted state per parameter particle).
    #[serde(with = "crate::serde_util::f64_any")]
    pub log_pl_pred: f64,
    #[serde(with = "crate::serde_util::f64_any")]
    pub cum_log_pl: f64,
    /// Outer ESS after reweighting, before any resampling.
    pub ess: f64,
    pub resampled: bool,
}

/// θ-update used inside the rejuvenation kernel.
pub trait Rejuvenation<F: ParametricModel>: Sync {
    type Tuning: Send + Sync;

    /// Population-level tuning at a resampling trigger (read-only afterwards).
    fn tune(
        &self,
        family: &F,
        cloud: &ThetaCloud<F::Theta, F::State>,
        data: &[F::Obs],
        rng: &mut SimRng,
    ) -> Result<Self::Tuning>;

    fn move_theta(
        &self,
        family: &F,
        tuning: &Self::Tuning,
        theta: &F::Theta,
        path: &[LatentState],
        data: &[F::Obs],
        rng: &mut SimRng,
    ) -> Result<F::Theta>;
}

/// Regularised population covariance: off-diagonals shrunk by λ toward the
/// diagonal. Falls back to the diagonal of variances plus 1e−6 when the
/// result is not positive definite.
pub fn population_metric(points: &[Vec<f64>], weights: &[f64], lambda: f64) -> Metric {
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for (p, &w) in points.iter().zip(weights) {
        for i in 0..d {
            mean[i] += w * p[i];
        }
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let sum_w2: f64 = weights.iter().map(|w| w * w).sum();
    let denom = 1.0 - sum_w2;
    for (p, &w) in points.iter().zip(weights) {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += w * (p[i] - mean[i]) * (p[j] - mean[j]);
            }
        }
    }
    if denom > 0.0 {
        cov /= denom;
    }
    let diag: Vec<f64> = (0..d).map(|i| cov[(i, i)]).collect();
    let mut shrunk = cov.clone() * (1.0 - lambda);
    for i in 0..d {
        shrunk[(i, i)] = diag[i];
    }
    let finite = shrunk.iter().all(|x| x.is_finite());
    let positive = diag.iter().all(|&v| v > 0.0);
    if finite && positive {
        if let Ok(m) = Metric::dense(shrunk) {
            return m;
        }
    }
    Metric::Diagonal(diag.iter().map(|&v| if v.is_finite() { v + 1e-6 } else { 1.0 }).collect())
}

/// Particle with the median outer weight; ties resolved by lowest index.
pub fn representative_index(log_weights: &[f64]) -> usize {
    let mut idx: Vec<usize> = (0..log_weights.len()).collect();
    idx.sort_by(|&a, &b| log_weights[a].total_cmp(&log_weights[b]).then(a.cmp(&b)));
    idx[(idx.len() - 1) / 2]
}

/// NUTS θ-moves with a population mass matrix and a step size tuned on a
/// representative particle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NutsRejuvenation {
    pub gradient: GradientMode,
    /// Dual-averaging iterations on the representative particle.
    pub tune_iters: usize,
    pub shrinkage: f64,
    pub max_depth: usize,
}

impl Default for NutsRejuvenation {
    fn default() -> Self {
        Self {
            gradient: GradientMode::Sensitivity,
            tune_iters: 30,
            shrinkage: 0.1,
            max_depth: 10,
        }
    }
}

/// Shared settings computed at a resampling trigger.
#[derive(Debug, Clone)]
pub struct SharedTuning {
    pub sampler: Nuts,
    pub representative: usize,
}

/// Mass matrix from the particle population and a step size from dual
/// averaging on the median-weight particle.
pub fn shared_hmc_tuning(
    family: &SeirFamily,
    cloud: &ThetaCloud<ThetaParams, crate::dynamics::AugmentedState>,
    data: &[crate::observation::Observation],
    settings: &NutsRejuvenation,
    rng: &mut SimRng,
) -> Result<SharedTuning> {
    let points: Vec<Vec<f64>> = cloud
        .thetas
        .iter()
        .map(|t| t.to_unconstrained())
        .collect::<Result<_>>()?;
    let w = cloud.normalised_weights().ok_or(Error::Degeneracy { t: cloud.t_next })?;
    let metric = population_metric(&points, &w, settings.shrinkage);
    let rep = representative_index(&cloud.log_weights);
    let path = cloud.filters[rep].sample_trajectory(rng)?;
    let target = ConditionalTarget {
        family,
        path: &path,
        data,
        mode: settings.gradient,
    };
    let mut nuts = Nuts::new(0.1, metric);
    nuts.max_depth = settings.max_depth;
    let mut adapt = AdaptiveNuts::fixed(nuts);
    adapt.adapt_step = true;
    let mut tuner = adapt.clone();
    let mut da = crate::nuts::DualAveraging::new(0.1, 0.8);
    tuner.sampler.find_reasonable_step(&points[rep], &target, rng);
    da.restart(tuner.sampler.step_size);
    let mut q = points[rep].clone();
    for _ in 0..settings.tune_iters {
        let d = tuner.sampler.transition(&q, &target, rng)?;
        q = d.q;
        tuner.sampler.step_size = da.update(d.accept_stat);
    }
    let mut sampler = tuner.sampler;
    if settings.tune_iters > 0 {
        sampler.step_size = da.final_step();
    }
    Ok(SharedTuning {
        sampler,
        representative: rep,
    })
}

impl Rejuvenation<SeirFamily> for NutsRejuvenation {
    type Tuning = SharedTuning;

    fn tune(
        &self,
        family: &SeirFamily,
        cloud: &ThetaCloud<ThetaParams, crate::dynamics::AugmentedState>,
        data: &[crate::observation::Observation],
        rng: &mut SimRng,
    ) -> Result<SharedTuning> {
        shared_hmc_tuning(family, cloud, data, self, rng)
    }

    fn move_theta(
        &self,
        family: &SeirFamily,
        tuning: &SharedTuning,
        theta: &ThetaParams,
        path: &[LatentState],
        data: &[crate::observation::Observation],
        rng: &mut SimRng,
    ) -> Result<ThetaParams> {
        let target = ConditionalTarget {
            family,
            path,
            data,
            mode: self.gradient,
        };
        let v = theta.to_unconstrained()?;
        let d = tuning.sampler.transition(&v, &target, rng)?;
        ThetaParams::from_unconstrained(&d.q, family.cfg.layout())
    }
}

/// Exact Gibbs draw of the grid index for the toy family.
#[derive(Debug, Clone, Copy, Default)]
pub struct GridGibbs;

impl Rejuvenation<ToyGrid> for GridGibbs {
    type Tuning = ();

    fn tune(
        &self,
        _family: &ToyGrid,
        _cloud: &ThetaCloud<usize, LatentState>,
        _data: &[crate::toy::ToyObs],
        _rng: &mut SimRng,
    ) -> Result<()> {
        Ok(())
    }

    fn move_theta(
        &self,
        family: &ToyGrid,
        _tuning: &(),
        _theta: &usize,
        path: &[LatentState],
        data: &[crate::toy::ToyObs],
        rng: &mut SimRng,
    ) -> Result<usize> {
        Ok(family.gibbs_index(path, data, rng))
    }
}

/// Sequential sampler state; advancing is deterministic given the seed, so
/// a run can be checkpointed between steps and resumed.
pub struct Smc2<'f, F: ParametricModel, R: Rejuvenation<F>> {
    pub family: &'f F,
    pub rejuvenation: R,
    pub config: Smc2Config,
    pub seed: u64,
    pub cloud: ThetaCloud<F::Theta, F::State>,
}

/// Serialised sampler state.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(serialize = "Th: Serialize, S: Serialize", deserialize = "Th: DeserializeOwned, S: DeserializeOwned"))]
pub struct Checkpoint<Th, S> {
    pub version: u32,
    pub seed: u64,
    pub config: Smc2Config,
    pub cloud: ThetaCloud<Th, S>,
}

impl<'f, F: ParametricModel, R: Rejuvenation<F>> Smc2<'f, F, R> {
    /// Draws N parameters from the prior and filters each through the
    /// first `t0` observations; weights start at the likelihood estimates.
    pub fn initialise(family: &'f F, rejuvenation: R, config: Smc2Config, data: &[F::Obs], seed: u64) -> Result<Self> {
        config.validate(data.len())?;
        let mut rng = substream(seed, u64::MAX);
        let key = fork_key(&mut rng);
        let init = &data[..config.t0];
        let results: Vec<(F::Theta, ParticleCloud<F::State>, f64)> = (0..config.n)
            .into_par_iter()
            .map(|n| {
                let mut r = substream(key, n as u64);
                let theta = family.sample_prior(&mut r);
                let model = family.model(&theta);
                match pf_run(&model, init, &config.filter, &mut r) {
                    Ok((cloud, ll)) => Ok((theta, cloud, ll)),
                    Err(Error::Degeneracy { .. }) => Ok((theta, ParticleCloud::empty(), f64::NEG_INFINITY)),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<_>>()?;
        let mut thetas = Vec::with_capacity(config.n);
        let mut filters = Vec::with_capacity(config.n);
        let mut log_weights = Vec::with_capacity(config.n);
        for (t, c, ll) in results {
            thetas.push(t);
            filters.push(c);
            log_weights.push(ll);
        }
        if log_sum_exp(&log_weights) == f64::NEG_INFINITY {
            return Err(Error::Degeneracy { t: config.t0 - 1 });
        }
        let mut s = Self {
            family,
            rejuvenation,
            config,
            seed,
            cloud: ThetaCloud {
                thetas,
                filters,
                log_weights,
                records: vec![],
                cum_log_pl: 0.0,
                cum_log_pl_pred: 0.0,
                t_next: config.t0,
            },
        };
        if s.cloud.ess() < s.config.resample_threshold * s.config.n as f64 {
            let mut r = substream(seed, u64::MAX - 1);
            s.resample_and_rejuvenate(data, &mut r)?;
        }
        Ok(s)
    }

    pub fn from_checkpoint(family: &'f F, rejuvenation: R, cp: Checkpoint<F::Theta, F::State>) -> Result<Self> {
        if cp.version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                cp.version
            )));
        }
        Ok(Self {
            family,
            rejuvenation,
            config: cp.config,
            seed: cp.seed,
            cloud: cp.cloud,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<F::Theta, F::State> {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            config: self.config,
            cloud: self.cloud.clone(),
        }
    }

    pub fn finished(&self, data: &[F::Obs]) -> bool {
        self.cloud.t_next >= data.len()
    }

    /// Prediction-step estimate of log p(e_t | e_{1:t−1}): one state per
    /// parameter particle, propagated from its filter and scored.
    fn predictive_estimate(&self, obs: &F::Obs, t: usize, key: u64, w_outer: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.cloud.len())
            .into_par_iter()
            .map(|n| {
                if w_outer[n] == 0.0 {
                    return f64::NEG_INFINITY;
                }
                let mut r = substream(key, n as u64);
                let model = self.family.model(&self.cloud.thetas[n]);
                let f = &self.cloud.filters[n];
                let Some(w) = f.normalised_weights() else {
                    return f64::NEG_INFINITY;
                };
                let k = categorical(&w, &mut r);
                let x = &f.particles[k];
                let z = model.sample_latent(model.latent(x), &mut r);
                match model.apply(x, z, t) {
                    Ok(next) => w_outer[n].ln() + model.log_obs(&next, obs, t),
                    Err(_) => f64::NEG_INFINITY,
                }
            })
            .collect();
        log_sum_exp(&terms)
    }

    /// Assimilates the next observation.
    pub fn step(&mut self, data: &[F::Obs]) -> Result<PlRecord> {
        let t = self.cloud.t_next;
        if t >= data.len() {
            return Err(Error::Precondition("no observations left".into()));
        }
        let mut rng = substream(self.seed, t as u64);
        let key_pred = fork_key(&mut rng);
        let key_step = fork_key(&mut rng);
        let obs = &data[t];
        let w_prev = self.cloud.normalised_weights().ok_or(Error::Degeneracy { t })?;
        let log_pl_pred = self.predictive_estimate(obs, t, key_pred, &w_prev);

        let family = self.family;
        let fcfg = self.config.filter;
        let incr: Vec<f64> = self
            .cloud
            .filters
            .par_iter_mut()
            .zip(self.cloud.thetas.par_iter())
            .zip(w_prev.par_iter())
            .enumerate()
            .map(|(n, ((f, theta), &w))| {
                if w == 0.0 {
                    return Ok(f64::NEG_INFINITY);
                }
                let mut r = substream(key_step, n as u64);
                let model = family.model(theta);
                match f.step(&model, obs, t, &fcfg, &mut r) {
                    Ok(v) => Ok(v),
                    Err(Error::Degeneracy { .. }) => Ok(f64::NEG_INFINITY),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<_>>()?;
        let terms: Vec<f64> = w_prev
            .iter()
            .zip(&incr)
            .map(|(w, i)| if *w == 0.0 { f64::NEG_INFINITY } else { w.ln() + i })
            .collect();
        let log_pl = log_sum_exp(&terms);
        if !log_pl.is_finite() {
            return Err(Error::Degeneracy { t });
        }
        for (lw, i) in self.cloud.log_weights.iter_mut().zip(&incr) {
            *lw += i;
        }
        self.cloud.cum_log_pl += log_pl;
        self.cloud.cum_log_pl_pred += log_pl_pred;
        let e = self.cloud.ess();
        let resampled = e < self.config.resample_threshold * self.config.n as f64;
        self.cloud.t_next = t + 1;
        if resampled {
            self.resample_and_rejuvenate(data, &mut rng)?;
        }
        let rec = PlRecord {
            t,
            log_pl,
            log_pl_pred,
            cum_log_pl: self.cloud.cum_log_pl,
            ess: e,
            resampled,
        };
        self.cloud.records.push(rec);
        Ok(rec)
    }

    /// Resamples the outer population and applies the Particle Gibbs kernel
    /// to every particle on the data seen so far.
    pub fn resample_and_rejuvenate(&mut self, data: &[F::Obs], rng: &mut SimRng) -> Result<()> {
        let seen = &data[..self.cloud.t_next];
        let t = self.cloud.t_next.saturating_sub(1);
        let w = self.cloud.normalised_weights().ok_or(Error::Degeneracy { t })?;
        let tuning = self.rejuvenation.tune(self.family, &self.cloud, seen, rng)?;
        let n = self.config.n;
        let ancestors = match self.config.outer_resampler {
            Resampler::Multinomial => crate::filters::multinomial_resample(&w, n, rng),
            Resampler::Systematic => crate::filters::systematic_indices(&w, n, rng.random::<f64>()),
        };
        let key = fork_key(rng);
        let family = self.family;
        let rejuv = &self.rejuvenation;
        let cloud = &self.cloud;
        let cfg = &self.config;
        let moved: Vec<(F::Theta, ParticleCloud<F::State>)> = ancestors
            .par_iter()
            .enumerate()
            .map(|(i, &k)| {
                let mut r = substream(key, i as u64);
                let mut theta = cloud.thetas[k].clone();
                let mut path = cloud.filters[k].sample_trajectory(&mut r)?;
                let mut filt = cloud.filters[k].clone();
                for _ in 0..cfg.sweeps.max(1) {
                    theta = rejuv.move_theta(family, &tuning, &theta, &path, seen, &mut r)?;
                    let model = family.model(&theta);
                    let out = match conditional_pf(&model, seen, &path, &cfg.filter, &mut r) {
                        Err(Error::Degeneracy { .. }) => {
                            let doubled = FilterConfig { m: cfg.filter.m * 2, ..cfg.filter };
                            conditional_pf(&model, seen, &path, &doubled, &mut r)?
                        }
                        other => other?,
                    };
                    path = out.0;
                    filt = out.1;
                }
                Ok((theta, filt))
            })
            .collect::<Result<_>>()?;
        for (i, (theta, filt)) in moved.into_iter().enumerate() {
            self.cloud.thetas[i] = theta;
            self.cloud.filters[i] = filt;
        }
        self.cloud.log_weights = vec![0.0; n];
        Ok(())
    }

    /// Runs to the end of the data, calling `on_step` after every step.
    pub fn run(&mut self, data: &[F::Obs], mut on_step: impl FnMut(&PlRecord, &ThetaCloud<F::Theta, F::State>)) -> Result<()> {
        while !self.finished(data) {
            let rec = self.step(data)?;
            on_step(&rec, &self.cloud);
        }
        Ok(())
    }
}

/// Convenience wrapper: initialise and run to the end.
pub fn smc2_run<F: ParametricModel, R: Rejuvenation<F>>(
    family: &F,
    rejuvenation: R,
    data: &[F::Obs],
    config: Smc2Config,
    seed: u64,
) -> Result<ThetaCloud<F::Theta, F::State>> {
    let mut s = Smc2::initialise(family, rejuvenation, config, data, seed)?;
    s.run(data, |_, _| {})?;
    Ok(s.cloud)
}

/// Both predictive-likelihood estimates recorded at step `t`.
pub fn predictive_likelihood_record<Th, S>(cloud: &ThetaCloud<Th, S>, t: usize) -> Option<(f64, f64)> {
    cloud
        .records
        .iter()
        .find(|r| r.t == t)
        .map(|r| (r.log_pl, r.log_pl_pred))
}

/// Writes the per-step record stream.
pub fn write_pl_csv<W: std::io::Write>(records: &[PlRecord], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["t", "log_pl", "log_pl_pred", "cum_log_pl", "ess", "resampled"])?;
    for r in records {
        wr.write_record([
            r.t.to_string(),
            format!("{:.17e}", r.log_pl),
            format!("{:.17e}", r.log_pl_pred),
            format!("{:.17e}", r.cum_log_pl),
            format!("{:.6}", r.ess),
            u8::from(r.resampled).to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
