//! Bootstrap and conditional particle filters over semi-Markov state spaces.
//!
//! The filters only see a model through [`StateSpace`]: a latent pair
//! `z = (s, d)` drawn from a Markov kernel, a state that is a deterministic
//! function of its parent and the new `z`, and an observation density.
//! Full latent trajectories are stored flat (`T × M`) together with the
//! ancestor indices, so any particle's path can be traced back.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::log_sum_exp;
use crate::error::{Error, Result};
use crate::hsmm::LatentState;
use crate::rng::{fork_key, substream, SimRng};

/// A state-space model with a semi-Markov latent component.
pub trait StateSpace: Sync {
    type State: Clone + Send + Sync;
    type Obs: Sync;

    /// State before the first latent draw.
    fn initial_state(&self) -> Self::State;
    fn sample_initial_latent<R: Rng + ?Sized>(&self, rng: &mut R) -> LatentState;
    fn sample_latent<R: Rng + ?Sized>(&self, prev: LatentState, rng: &mut R) -> LatentState;
    fn log_initial_latent(&self, z: LatentState) -> f64;
    fn log_latent_transition(&self, z_new: LatentState, z_prev: LatentState) -> f64;
    /// Deterministic part of the transition for day `t`.
    fn apply(&self, x: &Self::State, z: LatentState, t: usize) -> Result<Self::State>;
    fn log_obs(&self, x: &Self::State, obs: &Self::Obs, t: usize) -> f64;
    fn latent(&self, x: &Self::State) -> LatentState;

    /// log p(z_{0..T}) of a latent path.
    fn log_latent_path(&self, path: &[LatentState]) -> f64 {
        let Some(first) = path.first() else {
            return 0.0;
        };
        let mut lp = self.log_initial_latent(*first);
        for w in path.windows(2) {
            if lp == f64::NEG_INFINITY {
                break;
            }
            lp += self.log_latent_transition(w[1], w[0]);
        }
        lp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Resampler {
    #[default]
    Systematic,
    Multinomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Particle count.
    pub m: usize,
    /// Resample when ESS falls below this fraction of the active particles.
    pub resample_threshold: f64,
    pub resampler: Resampler,
    /// Ancestor sampling for the reference slot of the conditional filter.
    pub ancestor_sampling: bool,
}

impl FilterConfig {
    pub fn new(m: usize) -> Self {
        Self {
            m,
            resample_threshold: 0.5,
            resampler: Resampler::Systematic,
            ancestor_sampling: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(Error::Precondition("need at least one particle".into()));
        }
        if !(self.resample_threshold > 0.0 && self.resample_threshold <= 1.0) {
            return Err(Error::Precondition("resample_threshold must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Normalised weights from log-weights. All-−∞ input yields `None`.
pub fn normalise(log_weights: &[f64]) -> Option<Vec<f64>> {
    let lse = log_sum_exp(log_weights);
    if !lse.is_finite() {
        return None;
    }
    Some(log_weights.iter().map(|w| (w - lse).exp()).collect())
}

/// Effective sample size 1/Σw̃² of a set of log-weights.
pub fn ess(log_weights: &[f64]) -> f64 {
    match normalise(log_weights) {
        Some(w) => 1.0 / w.iter().map(|x| x * x).sum::<f64>(),
        None => 0.0,
    }
}

/// Systematic resampling of `n` offspring from normalised `weights` using
/// the single uniform `u ∈ [0, 1)`.
pub fn systematic_indices(weights: &[f64], n: usize, u: f64) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut i = 0;
    let last = weights.len() - 1;
    for j in 0..n {
        let pos = (j as f64 + u) / n as f64;
        while pos > cum && i < last {
            i += 1;
            cum += weights[i];
        }
        out.push(i);
    }
    out
}

pub fn systematic_resample<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Vec<usize> {
    let u: f64 = rng.random();
    systematic_indices(weights, weights.len(), u)
}

/// Draws one index from normalised weights.
pub fn categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

pub fn multinomial_resample<R: Rng + ?Sized>(weights: &[f64], n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| categorical(weights, rng)).collect()
}

/// How the reference slot behaves at one step of a conditional filter.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Pin {
    pub z: LatentState,
    /// Ancestor of the reference slot; `None` keeps slot 0's own lineage.
    pub ancestor: Option<usize>,
    /// Forces slot 0 to zero weight (used to check code-path equivalence).
    pub suppress: bool,
}

/// A weighted particle system with its full latent ancestry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleCloud<S> {
    pub particles: Vec<S>,
    /// Current unnormalised log-weights.
    #[serde(with = "crate::serde_util::vec_f64")]
    pub log_weights: Vec<f64>,
    /// `latents[t][m]`: latent pair of particle `m` at step `t`.
    pub latents: Vec<Vec<LatentState>>,
    /// `ancestors[t][m]`: index at step `t − 1` of the parent of particle `m`.
    pub ancestors: Vec<Vec<usize>>,
    /// Running log p̂(e_{1:t}).
    #[serde(with = "crate::serde_util::f64_any")]
    pub log_likelihood: f64,
    /// log p̂(e_t | e_{1:t−1}) per step.
    #[serde(with = "crate::serde_util::vec_f64")]
    pub log_increments: Vec<f64>,
    /// ESS before the resampling decision at each step.
    pub ess: Vec<f64>,
    pub resampled: Vec<bool>,
}

impl<S: Clone + Send + Sync> ParticleCloud<S> {
    pub fn empty() -> Self {
        Self {
            particles: vec![],
            log_weights: vec![],
            latents: vec![],
            ancestors: vec![],
            log_likelihood: 0.0,
            log_increments: vec![],
            ess: vec![],
            resampled: vec![],
        }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Number of steps processed.
    pub fn steps(&self) -> usize {
        self.latents.len()
    }

    pub fn normalised_weights(&self) -> Option<Vec<f64>> {
        normalise(&self.log_weights)
    }

    /// Latent path of particle `m` at the final step, traced through the ancestry.
    pub fn trace(&self, m: usize) -> Vec<LatentState> {
        let t_len = self.latents.len();
        let mut path = vec![LatentState::new(0, 0); t_len];
        let mut idx = m;
        for t in (0..t_len).rev() {
            path[t] = self.latents[t][idx];
            idx = self.ancestors[t][idx];
        }
        path
    }

    /// Draws a path proportionally to the final weights.
    pub fn sample_trajectory<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<LatentState>> {
        let w = self.normalised_weights().ok_or(Error::Degeneracy {
            t: self.steps().saturating_sub(1),
        })?;
        Ok(self.trace(categorical(&w, rng)))
    }

    /// Advances one step for observation `obs` on day `t` and returns
    /// log p̂(e_t | e_{1:t−1}).
    pub fn step<M>(&mut self, model: &M, obs: &M::Obs, t: usize, fcfg: &FilterConfig, rng: &mut SimRng) -> Result<f64>
    where
        M: StateSpace<State = S>,
    {
        self.step_inner(model, obs, t, fcfg, None, rng)
    }

    pub(crate) fn step_inner<M>(
        &mut self,
        model: &M,
        obs: &M::Obs,
        t: usize,
        fcfg: &FilterConfig,
        pin: Option<Pin>,
        rng: &mut SimRng,
    ) -> Result<f64>
    where
        M: StateSpace<State = S>,
    {
        let m = fcfg.m;
        let first_free = usize::from(pin.is_some());
        let suppress = pin.is_some_and(|p| p.suppress);
        let key = fork_key(rng);
        let first = self.steps() == 0;

        // Parents and their normalised weights after the resampling decision.
        let active = (m - usize::from(suppress)) as f64;
        let (parents, log_w_prev): (Vec<usize>, Vec<f64>) = if first {
            let mut lw = vec![-active.ln(); m];
            if suppress {
                lw[0] = f64::NEG_INFINITY;
            }
            ((0..m).collect(), lw)
        } else {
            let w = self.normalised_weights().ok_or(Error::Degeneracy { t })?;
            let e = 1.0 / w.iter().map(|x| x * x).sum::<f64>();
            self.ess.push(e);
            let resample = e < fcfg.resample_threshold * active;
            self.resampled.push(resample);
            if resample {
                let n_free = m - first_free;
                let mut idx = vec![0usize; m];
                let free = match fcfg.resampler {
                    Resampler::Systematic => systematic_indices(&w, n_free, rng.random::<f64>()),
                    Resampler::Multinomial => multinomial_resample(&w, n_free, rng),
                };
                idx[first_free..].copy_from_slice(&free);
                if let Some(p) = pin {
                    idx[0] = p.ancestor.unwrap_or(0);
                }
                let mut lw = vec![-(active.ln()); m];
                if suppress {
                    lw[0] = f64::NEG_INFINITY;
                }
                (idx, lw)
            } else {
                let mut idx: Vec<usize> = (0..m).collect();
                if let Some(p) = pin {
                    idx[0] = p.ancestor.unwrap_or(0);
                }
                let lw = w.iter().map(|x| x.ln()).collect();
                (idx, lw)
            }
        };

        let initial = if first { Some(model.initial_state()) } else { None };
        let particles = &self.particles;
        let propagate = |slot: usize| -> Result<(S, LatentState, f64)> {
            let parent_state = match &initial {
                Some(x0) => x0,
                None => &particles[parents[slot]],
            };
            let z = match pin {
                Some(p) if slot == 0 => p.z,
                _ => {
                    let mut r = substream(key, (slot - first_free) as u64);
                    if first {
                        model.sample_initial_latent(&mut r)
                    } else {
                        model.sample_latent(model.latent(parent_state), &mut r)
                    }
                }
            };
            let x = model.apply(parent_state, z, t)?;
            let lg = if suppress && slot == 0 {
                f64::NEG_INFINITY
            } else {
                model.log_obs(&x, obs, t)
            };
            Ok((x, z, lg))
        };
        let results: Vec<(S, LatentState, f64)> = if m >= 32 {
            (0..m).into_par_iter().with_min_len(8).map(propagate).collect::<Result<_>>()?
        } else {
            (0..m).map(propagate).collect::<Result<_>>()?
        };

        let mut new_particles = Vec::with_capacity(m);
        let mut zs = Vec::with_capacity(m);
        let mut lw = Vec::with_capacity(m);
        let mut incr_terms = Vec::with_capacity(m);
        for ((x, z, lg), prev) in results.into_iter().zip(&log_w_prev) {
            new_particles.push(x);
            zs.push(z);
            let w = if lg == f64::NEG_INFINITY { lg } else { prev + lg };
            lw.push(w);
            incr_terms.push(w);
        }
        let incr = log_sum_exp(&incr_terms);
        if !incr.is_finite() {
            return Err(Error::Degeneracy { t });
        }
        if first {
            self.ancestors.push((0..m).collect());
        } else {
            self.ancestors.push(parents);
        }
        self.particles = new_particles;
        self.latents.push(zs);
        self.log_weights = lw;
        self.log_likelihood += incr;
        self.log_increments.push(incr);
        Ok(incr)
    }
}

/// Bootstrap particle filter over `data` (day `t` = index in `data`).
pub fn pf_run<M: StateSpace>(
    model: &M,
    data: &[M::Obs],
    fcfg: &FilterConfig,
    rng: &mut SimRng,
) -> Result<(ParticleCloud<M::State>, f64)> {
    fcfg.validate()?;
    if data.is_empty() {
        return Err(Error::Precondition("need at least one observation".into()));
    }
    let mut cloud = ParticleCloud::empty();
    for (t, obs) in data.iter().enumerate() {
        cloud.step(model, obs, t, fcfg, rng)?;
    }
    let ll = cloud.log_likelihood;
    Ok((cloud, ll))
}

/// Log density of data `data[from..]` along `path[from..]`, starting from `x`
/// (the state at step `from − 1`).
fn future_log_density<M: StateSpace>(
    model: &M,
    x: &M::State,
    path: &[LatentState],
    data: &[M::Obs],
    from: usize,
) -> f64 {
    let mut cur = x.clone();
    let mut lp = 0.0;
    for t in from..data.len() {
        match model.apply(&cur, path[t], t) {
            Ok(n) => {
                lp += model.log_obs(&n, &data[t], t);
                cur = n;
            }
            Err(_) => return f64::NEG_INFINITY,
        }
        if lp == f64::NEG_INFINITY {
            break;
        }
    }
    lp
}

/// Conditional particle filter: slot 0 follows `reference`, the other
/// `M − 1` slots are free. Returns a path drawn from the final weights and
/// the particle system (which may seed further filtering steps).
pub fn conditional_pf<M: StateSpace>(
    model: &M,
    data: &[M::Obs],
    reference: &[LatentState],
    fcfg: &FilterConfig,
    rng: &mut SimRng,
) -> Result<(Vec<LatentState>, ParticleCloud<M::State>)> {
    conditional_pf_inner(model, data, reference, fcfg, false, rng)
}

pub(crate) fn conditional_pf_inner<M: StateSpace>(
    model: &M,
    data: &[M::Obs],
    reference: &[LatentState],
    fcfg: &FilterConfig,
    suppress: bool,
    rng: &mut SimRng,
) -> Result<(Vec<LatentState>, ParticleCloud<M::State>)> {
    fcfg.validate()?;
    if reference.len() != data.len() {
        return Err(Error::Precondition(format!(
            "reference has length {}, data has length {}",
            reference.len(),
            data.len()
        )));
    }
    if model.log_latent_path(reference) == f64::NEG_INFINITY {
        return Err(Error::Precondition("reference trajectory is infeasible".into()));
    }
    let mut cloud = ParticleCloud::empty();
    for (t, obs) in data.iter().enumerate() {
        let ancestor = if fcfg.ancestor_sampling && t > 0 && !suppress {
            let lw = &cloud.log_weights;
            let scores: Vec<f64> = cloud
                .particles
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let base = lw[i] + model.log_latent_transition(reference[t], model.latent(x));
                    if base == f64::NEG_INFINITY {
                        base
                    } else {
                        base + future_log_density(model, x, reference, data, t)
                    }
                })
                .collect();
            let w = normalise(&scores).ok_or(Error::Degeneracy { t })?;
            Some(categorical(&w, rng))
        } else {
            None
        };
        let pin = Pin {
            z: reference[t],
            ancestor,
            suppress,
        };
        cloud.step_inner(model, obs, t, fcfg, Some(pin), rng)?;
    }
    let path = cloud.sample_trajectory(rng)?;
    Ok((path, cloud))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::toy::{ToyModel, ToyObs};

    #[test]
    fn ess_edges() {
        assert!((ess(&[0.3; 10]) - 10.0).abs() < 1e-12);
        let mut lw = vec![f64::NEG_INFINITY; 10];
        lw[3] = -2.0;
        assert!((ess(&lw) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn systematic_offspring_expectation() {
        let w = [0.05, 0.4, 0.15, 0.3, 0.1];
        let n = w.len();
        let reps = 100_000;
        let mut counts = [0.0f64; 5];
        let mut sq = [0.0f64; 5];
        let mut rng = seeded(4);
        for _ in 0..reps {
            let mut c = [0.0f64; 5];
            for i in systematic_resample(&w, &mut rng) {
                c[i] += 1.0;
            }
            for i in 0..n {
                counts[i] += c[i];
                sq[i] += c[i] * c[i];
            }
        }
        for i in 0..n {
            let mean = counts[i] / reps as f64;
            let var = (sq[i] / reps as f64 - mean * mean).max(1e-12);
            let se = (var / reps as f64).sqrt();
            let expected = n as f64 * w[i];
            assert!((mean - expected).abs() <= 3.0 * se + 1e-9, "{i}: {mean} vs {expected}");
        }
    }

    #[test]
    fn vacuous_observation_gives_zero_loglik() {
        let model = ToyModel::two_regime();
        let mut rng = seeded(1);
        let (_, ll) = pf_run(&model, &[ToyObs(None)], &FilterConfig::new(16), &mut rng).unwrap();
        assert_eq!(ll, 0.0);
    }

    #[test]
    fn single_particle_is_path_density() {
        let model = ToyModel::two_regime();
        let data: Vec<ToyObs> = [1.0, 0.2, 2.5, 3.1, -0.4].iter().map(|&y| ToyObs(Some(y))).collect();
        let mut rng = seeded(2);
        let (cloud, ll) = pf_run(&model, &data, &FilterConfig::new(1), &mut rng).unwrap();
        let path = cloud.trace(0);
        let mut direct = 0.0;
        let mut x = model.initial_state();
        for (t, z) in path.iter().enumerate() {
            x = model.apply(&x, *z, t).unwrap();
            direct += model.log_obs(&x, &data[t], t);
        }
        assert!((ll - direct).abs() < 1e-12);
    }

    #[test]
    fn single_slot_cpf_returns_reference() {
        let model = ToyModel::two_regime();
        let data: Vec<ToyObs> = (0..12).map(|i| ToyObs(Some(i as f64 * 0.3))).collect();
        let mut rng = seeded(3);
        let reference = model.simulate(12, &mut rng).0;
        let (out, _) = conditional_pf(&model, &data, &reference, &FilterConfig::new(1), &mut rng).unwrap();
        assert_eq!(out, reference);
    }

    #[test]
    fn infeasible_reference_is_rejected() {
        let model = ToyModel::two_regime();
        let data: Vec<ToyObs> = (0..3).map(|_| ToyObs(Some(0.0))).collect();
        let bad = vec![LatentState::new(0, 4), LatentState::new(1, 2), LatentState::new(1, 1)];
        let mut rng = seeded(3);
        assert!(matches!(
            conditional_pf(&model, &data, &bad, &FilterConfig::new(8), &mut rng),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn suppressed_reference_reduces_to_bootstrap_filter() {
        let model = ToyModel::two_regime();
        let mut rng = seeded(5);
        let (reference, ys) = model.simulate(30, &mut rng);
        let data: Vec<ToyObs> = ys.into_iter().map(|y| ToyObs(Some(y))).collect();
        let m = 24;
        let (cloud_pf, ll_pf) = pf_run(&model, &data, &FilterConfig::new(m), &mut seeded(99)).unwrap();
        let fc = FilterConfig::new(m + 1);
        let (_, cloud_c) = conditional_pf_inner(&model, &data, &reference, &fc, true, &mut seeded(99)).unwrap();
        assert!((cloud_c.log_likelihood - ll_pf).abs() < 1e-9);
        for t in 0..data.len() {
            assert_eq!(&cloud_c.latents[t][1..], &cloud_pf.latents[t][..]);
        }
    }

    #[test]
    fn output_paths_are_feasible_and_deterministic() {
        let model = ToyModel::two_regime();
        let mut rng = seeded(6);
        let (reference, ys) = model.simulate(40, &mut rng);
        let data: Vec<ToyObs> = ys.into_iter().map(|y| ToyObs(Some(y))).collect();
        let fc = FilterConfig::new(32);
        let mut a = seeded(10);
        let mut b = seeded(10);
        let (pa, ca) = conditional_pf(&model, &data, &reference, &fc, &mut a).unwrap();
        let (pb, cb) = conditional_pf(&model, &data, &reference, &fc, &mut b).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(ca.log_weights, cb.log_weights);
        assert!(model.log_latent_path(&pa).is_finite());
        let with_as = FilterConfig {
            ancestor_sampling: true,
            ..fc
        };
        let (pc, _) = conditional_pf(&model, &data, &reference, &with_as, &mut a).unwrap();
        assert!(model.log_latent_path(&pc).is_finite());
    }
}
