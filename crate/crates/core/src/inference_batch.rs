//! Particle Gibbs with NUTS parameter updates.
//!
//! Each iteration first moves θ with one NUTS transition targeting
//! p(θ | z_{1:T}, e_{1:T}), then refreshes the latent path with a
//! conditional particle filter at the new θ.
//!
//! The conditional posterior is differentiated exactly through the ODE by
//! forward sensitivities: the sensitivity columns for `log_beta`, γ1, γ2 and
//! ε are integrated with the same RK4 stages as the state, so the gradient
//! is that of the discrete map actually evaluated.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{beta_index, ode_step_rates, ode_step_sens, OdeRates, OdeState, SensColumn, SensLayout};
use crate::error::{Error, Result};
use crate::filters::{conditional_pf, pf_run, FilterConfig, StateSpace};
use crate::hsmm::{duration_logpmf, LatentState};
use crate::model::{ParametricModel, SeirFamily};
use crate::nuts::{AdaptiveNuts, LogDensity, NutsDraw};
use crate::observation::{nb_mean_phi_term, Observation};
use crate::params::{nb_duration_grad, pullback, ThetaGrad, ThetaParams};
use crate::rng::{substream, SimRng};

/// How the gradient of the conditional posterior is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    Sensitivity,
    /// Central differences in unconstrained space with the given step.
    FiniteDifference { step: f64 },
}

/// log p(z_{0..T} | θ) and its gradient in constrained coordinates.
pub fn log_latent_path_grad(theta: &ThetaParams, init_destinations: &[usize], path: &[LatentState]) -> (f64, ThetaGrad) {
    let mut g = ThetaGrad::zeros(theta.layout());
    let k = theta.log_beta.len();
    let ninf = (f64::NEG_INFINITY, ThetaGrad::zeros(theta.layout()));
    let Some(first) = path.first() else {
        return (0.0, g);
    };
    if first.s != k {
        return ninf;
    }
    let mut lp = 0.0;
    let duration = |s: usize, d: u32, lp: &mut f64, g: &mut ThetaGrad| {
        *lp += duration_logpmf(d, theta.r[s], theta.psi[s]);
        let (dr, dpsi) = nb_duration_grad(d as f64, theta.r[s], theta.psi[s]);
        g.r[s] += dr;
        g.psi[s] += dpsi;
    };
    duration(k, first.d, &mut lp, &mut g);
    for w in path.windows(2) {
        let (prev, cur) = (w[0], w[1]);
        if prev.d > 0 {
            if cur.s != prev.s || cur.d + 1 != prev.d {
                return ninf;
            }
            continue;
        }
        let i = prev.s;
        if i == k {
            match init_destinations.iter().position(|&d| d == cur.s) {
                Some(j) => {
                    lp += theta.p_init[j].ln();
                    g.p_init[j] += 1.0 / theta.p_init[j];
                }
                None => return ninf,
            }
        } else if i + 1 == k {
            if cur.s + 2 != k {
                return ninf;
            }
        } else if cur.s == i + 1 {
            lp += theta.p[i].ln();
            g.p[i] += 1.0 / theta.p[i];
        } else if cur.s == i.saturating_sub(1) {
            lp += (1.0 - theta.p[i]).ln();
            g.p[i] -= 1.0 / (1.0 - theta.p[i]);
        } else {
            return ninf;
        }
        duration(cur.s, cur.d, &mut lp, &mut g);
    }
    (lp, g)
}

fn nb_channel(y: u64, mu: f64, phi: f64) -> Option<(f64, f64, f64)> {
    if mu <= 0.0 {
        return if y == 0 { Some((0.0, 0.0, 0.0)) } else { None };
    }
    Some(nb_mean_phi_term(y, mu, phi))
}

/// Σ_t log p(e_t | x_t) along the deterministic state path implied by
/// `path`, with its gradient when `want_grad` is set.
pub fn obs_loglik_grad(
    family: &SeirFamily,
    theta: &ThetaParams,
    path: &[LatentState],
    data: &[Observation],
    want_grad: bool,
) -> Result<(f64, ThetaGrad)> {
    let cfg = &family.cfg;
    let sched = &family.sched;
    let k = theta.log_beta.len();
    let lay = SensLayout { k };
    let ncol = if want_grad { lay.columns() } else { 0 };
    let rates = OdeRates::new(theta, cfg);
    let window = cfg.window;
    let mut o = OdeState::initial(cfg);
    let mut sens: Vec<SensColumn> = vec![[0.0; 6]; ncol];
    let mut hist = vec![0.0; window];
    let mut dhist = vec![vec![0.0; ncol]; window];
    let mut gcols = vec![0.0; ncol];
    let mut g = ThetaGrad::zeros(theta.layout());
    let mut lp = 0.0;
    let mut dmu = vec![0.0; ncol];
    let ninf = || Ok((f64::NEG_INFINITY, ThetaGrad::zeros(theta.layout())));
    for (t, (z, obs)) in path.iter().zip(data).enumerate() {
        let b = beta_index(z.s, cfg);
        let beta = theta.log_beta[b].exp();
        let nu = sched.nu_lagged(t, cfg.vaccine_delay);
        let (next, inc) = if want_grad {
            let (n, c) = ode_step_sens(o, beta, b, &rates, nu, &mut sens, lay);
            if !(c.is_finite() && [n.s, n.e1, n.e2, n.i1, n.i2, n.r].iter().all(|v| v.is_finite())) {
                return Err(Error::Numerical {
                    day: t,
                    state: format!("{n:?}"),
                });
            }
            (n, c)
        } else {
            ode_step_rates(o, beta, &rates, nu, t)?
        };
        o = next;
        if window > 0 {
            hist.rotate_left(1);
            hist[window - 1] = inc;
            dhist.rotate_left(1);
            for (c, col) in sens.iter().enumerate() {
                dhist[window - 1][c] = col[5];
            }
        }
        if family.kind.uses_cases() {
            if let Some(y) = obs.cases {
                let ur = sched.ur_at(obs.t);
                let mu = inc * ur;
                match nb_channel(y, mu, theta.phi_cases) {
                    None => return ninf(),
                    Some((v, dm, dphi)) => {
                        lp += v;
                        g.phi_cases += dphi;
                        for c in 0..ncol {
                            gcols[c] += dm * ur * dhist[window - 1][c];
                        }
                    }
                }
            }
        }
        if let Some(y) = obs.deaths {
            let ifr = sched.ifr_at(obs.t);
            let mut mu = 0.0;
            dmu.iter_mut().for_each(|x| *x = 0.0);
            for lag in 1..window {
                let f = sched.delay.at_lag(lag);
                let idx = window - 1 - lag;
                mu += hist[idx] * f;
                for c in 0..ncol {
                    dmu[c] += dhist[idx][c] * f;
                }
            }
            mu *= ifr;
            match nb_channel(y, mu, theta.phi_deaths) {
                None => return ninf(),
                Some((v, dm, dphi)) => {
                    lp += v;
                    g.phi_deaths += dphi;
                    for c in 0..ncol {
                        gcols[c] += dm * ifr * dmu[c];
                    }
                }
            }
        }
    }
    if want_grad {
        g.log_beta.copy_from_slice(&gcols[..k]);
        g.gamma1 = gcols[lay.gamma1()];
        g.gamma2 = gcols[lay.gamma2()];
        g.epsilon = gcols[lay.epsilon()];
    }
    Ok((lp, g))
}

/// Value-only log target: prior (with Jacobian) + path + observations.
fn conditional_value(family: &SeirFamily, v: &[f64], path: &[LatentState], data: &[Observation]) -> f64 {
    let layout = family.cfg.layout();
    let Ok((lprior, _)) = family.prior.log_prior_unconstrained(v, layout) else {
        return f64::NEG_INFINITY;
    };
    if !lprior.is_finite() {
        return f64::NEG_INFINITY;
    }
    let Ok(theta) = ThetaParams::from_unconstrained(v, layout) else {
        return f64::NEG_INFINITY;
    };
    let (lz, _) = log_latent_path_grad(&theta, &family.cfg.init_destinations, path);
    if !lz.is_finite() {
        return f64::NEG_INFINITY;
    }
    match obs_loglik_grad(family, &theta, path, data, false) {
        Ok((lo, _)) => lprior + lz + lo,
        Err(_) => f64::NEG_INFINITY,
    }
}

/// log p(θ | z_{1:T}, e_{1:T}) up to a constant, as a function of the
/// unconstrained vector `v`, with its gradient.
pub fn conditional_log_posterior(
    family: &SeirFamily,
    v: &[f64],
    path: &[LatentState],
    data: &[Observation],
    mode: GradientMode,
) -> Result<(f64, Vec<f64>)> {
    if path.len() != data.len() {
        return Err(Error::Precondition("trajectory and data lengths differ".into()));
    }
    let layout = family.cfg.layout();
    if let GradientMode::FiniteDifference { step } = mode {
        let f0 = conditional_value(family, v, path, data);
        let mut grad = vec![0.0; v.len()];
        if f0.is_finite() {
            let mut w = v.to_vec();
            for i in 0..v.len() {
                w[i] = v[i] + step;
                let fp = conditional_value(family, &w, path, data);
                w[i] = v[i] - step;
                let fm = conditional_value(family, &w, path, data);
                w[i] = v[i];
                grad[i] = (fp - fm) / (2.0 * step);
            }
        }
        return Ok((f0, grad));
    }
    let (lprior, gprior) = family.prior.log_prior_unconstrained(v, layout)?;
    if !lprior.is_finite() {
        return Ok((f64::NEG_INFINITY, vec![0.0; v.len()]));
    }
    let theta = ThetaParams::from_unconstrained(v, layout)?;
    let (lz, mut g) = log_latent_path_grad(&theta, &family.cfg.init_destinations, path);
    if !lz.is_finite() {
        return Ok((f64::NEG_INFINITY, vec![0.0; v.len()]));
    }
    let (lo, go) = obs_loglik_grad(family, &theta, path, data, true)?;
    if !lo.is_finite() {
        return Ok((f64::NEG_INFINITY, vec![0.0; v.len()]));
    }
    for (a, b) in g.log_beta.iter_mut().zip(&go.log_beta) {
        *a += b;
    }
    g.gamma1 += go.gamma1;
    g.gamma2 += go.gamma2;
    g.epsilon += go.epsilon;
    g.phi_cases += go.phi_cases;
    g.phi_deaths += go.phi_deaths;
    let mut grad = pullback(v, &theta, &g);
    for (a, b) in grad.iter_mut().zip(gprior) {
        *a += b;
    }
    Ok((lprior + lz + lo, grad))
}

/// The conditional posterior as a [`LogDensity`] for a fixed path.
pub struct ConditionalTarget<'a> {
    pub family: &'a SeirFamily,
    pub path: &'a [LatentState],
    pub data: &'a [Observation],
    pub mode: GradientMode,
}

impl LogDensity for ConditionalTarget<'_> {
    fn dim(&self) -> usize {
        self.family.cfg.layout().dim()
    }
    fn log_density_grad(&self, q: &[f64]) -> Result<(f64, Vec<f64>)> {
        conditional_log_posterior(self.family, q, self.path, self.data, self.mode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PGibbsConfig {
    pub filter: FilterConfig,
    pub gradient: GradientMode,
}

impl Default for PGibbsConfig {
    fn default() -> Self {
        Self {
            filter: FilterConfig::new(128),
            gradient: GradientMode::Sensitivity,
        }
    }
}

/// Current (θ, z_{1:T}) of a chain, with quantities derived from both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PGibbsState {
    pub theta: ThetaParams,
    pub v: Vec<f64>,
    pub trajectory: Vec<LatentState>,
    /// Conditional log posterior at (θ, z).
    #[serde(with = "crate::serde_util::f64_any")]
    pub log_posterior: f64,
    /// Σ_t log p(e_t | x_t) along z under θ.
    #[serde(with = "crate::serde_util::f64_any")]
    pub obs_loglik: f64,
}

impl PGibbsState {
    pub fn new(family: &SeirFamily, theta: ThetaParams, trajectory: Vec<LatentState>, data: &[Observation]) -> Result<Self> {
        let v = theta.to_unconstrained()?;
        let log_posterior = conditional_value(family, &v, &trajectory, data);
        let (obs_loglik, _) = obs_loglik_grad(family, &theta, &trajectory, data, false)?;
        Ok(Self {
            theta,
            v,
            trajectory,
            log_posterior,
            obs_loglik,
        })
    }
}

/// Per-iteration sampler statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterStats {
    pub accept_stat: f64,
    pub depth: usize,
    pub n_leapfrog: usize,
    pub divergent: bool,
    pub step_size: f64,
    pub cpf_retried: bool,
}

/// CPF step with one retry at doubled particle count on degeneracy.
pub fn cpf_with_retry<M: StateSpace>(
    model: &M,
    data: &[M::Obs],
    reference: &[LatentState],
    fcfg: &FilterConfig,
    rng: &mut SimRng,
) -> Result<(Vec<LatentState>, bool)> {
    match conditional_pf(model, data, reference, fcfg, rng) {
        Ok((p, _)) => Ok((p, false)),
        Err(Error::Degeneracy { .. }) => {
            let doubled = FilterConfig { m: fcfg.m * 2, ..*fcfg };
            let (p, _) = conditional_pf(model, data, reference, &doubled, rng)?;
            Ok((p, true))
        }
        Err(e) => Err(e),
    }
}

/// One Particle Gibbs sweep: NUTS on θ, then CPF on the trajectory.
pub fn pgibbs_kernel(
    state: &PGibbsState,
    family: &SeirFamily,
    data: &[Observation],
    pcfg: &PGibbsConfig,
    sampler: &mut AdaptiveNuts,
    rng: &mut SimRng,
) -> Result<(PGibbsState, IterStats)> {
    let target = ConditionalTarget {
        family,
        path: &state.trajectory,
        data,
        mode: pcfg.gradient,
    };
    let step_size = sampler.sampler.step_size;
    let draw: NutsDraw = sampler.step(&state.v, &target, rng)?;
    let theta = ThetaParams::from_unconstrained(&draw.q, family.cfg.layout())?;
    let model = family.model(&theta);
    let (trajectory, cpf_retried) = cpf_with_retry(&model, data, &state.trajectory, &pcfg.filter, rng)?;
    let next = PGibbsState::new(family, theta, trajectory, data)?;
    Ok((
        next,
        IterStats {
            accept_stat: draw.accept_stat,
            depth: draw.depth,
            n_leapfrog: draw.n_leapfrog,
            divergent: draw.divergent,
            step_size,
            cpf_retried,
        },
    ))
}

/// Starting point of a chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ChainInit {
    #[default]
    Prior,
    Supplied(ThetaParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub n_chains: usize,
    pub n_iters: usize,
    pub n_burnin: usize,
    pub init: ChainInit,
    pub seed: u64,
    pub pg: PGibbsConfig,
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iters <= self.n_burnin {
            return Err(Error::Precondition("n_iters must exceed n_burnin".into()));
        }
        if self.n_chains < 1 {
            return Err(Error::Precondition("need at least one chain".into()));
        }
        self.pg.filter.validate()
    }
}

/// Everything recorded by one chain, burn-in included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainOutput {
    pub chain: usize,
    pub n_burnin: usize,
    pub theta: Vec<ThetaParams>,
    pub trajectories: Vec<Vec<LatentState>>,
    #[serde(with = "crate::serde_util::vec_f64")]
    pub log_posterior: Vec<f64>,
    #[serde(with = "crate::serde_util::vec_f64")]
    pub obs_loglik: Vec<f64>,
    pub stats: Vec<IterStats>,
}

impl ChainOutput {
    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn retained(&self) -> std::ops::Range<usize> {
        self.n_burnin.min(self.len())..self.len()
    }

    /// Retained draws of reported value `j` (see [`ThetaParams::reported_values`]).
    pub fn retained_component(&self, j: usize) -> Vec<f64> {
        self.theta[self.retained()].iter().map(|t| t.reported_values()[j]).collect()
    }
}

/// Draws an initial trajectory by filtering at `theta`.
pub fn initial_trajectory(
    family: &SeirFamily,
    theta: &ThetaParams,
    data: &[Observation],
    fcfg: &FilterConfig,
    rng: &mut SimRng,
) -> Result<Vec<LatentState>> {
    let model = family.model(theta);
    let (cloud, _) = pf_run(&model, data, fcfg, rng)?;
    cloud.sample_trajectory(rng)
}

/// Runs chain `index` of a configuration.
pub fn run_chain(family: &SeirFamily, data: &[Observation], cc: &ChainConfig, index: usize) -> Result<ChainOutput> {
    let mut rng = substream(cc.seed, index as u64);
    let layout = family.cfg.layout();
    // Prior draws can sit where the data are impossible; redraw a few times.
    let mut attempt = 0;
    let (theta0, traj0) = loop {
        let theta = match &cc.init {
            ChainInit::Prior => family.prior.sample(layout, &mut rng),
            ChainInit::Supplied(t) => t.clone(),
        };
        match initial_trajectory(family, &theta, data, &cc.pg.filter, &mut rng) {
            Ok(z) => break (theta, z),
            Err(e) if e.is_numerical() && attempt < 20 && cc.init == ChainInit::Prior => attempt += 1,
            Err(e) => return Err(e),
        }
    };
    let mut state = PGibbsState::new(family, theta0, traj0, data)?;
    let mut sampler = AdaptiveNuts::new(layout.dim(), cc.n_burnin);
    let mut out = ChainOutput {
        chain: index,
        n_burnin: cc.n_burnin,
        theta: Vec::with_capacity(cc.n_iters),
        trajectories: Vec::with_capacity(cc.n_iters),
        log_posterior: Vec::with_capacity(cc.n_iters),
        obs_loglik: Vec::with_capacity(cc.n_iters),
        stats: Vec::with_capacity(cc.n_iters),
    };
    for _ in 0..cc.n_iters {
        let (next, stats) = pgibbs_kernel(&state, family, data, &cc.pg, &mut sampler, &mut rng)?;
        state = next;
        out.theta.push(state.theta.clone());
        out.trajectories.push(state.trajectory.clone());
        out.log_posterior.push(state.log_posterior);
        out.obs_loglik.push(state.obs_loglik);
        out.stats.push(stats);
    }
    Ok(out)
}

/// Independent chains, run in parallel.
pub fn run_chains(family: &SeirFamily, data: &[Observation], cc: &ChainConfig) -> Result<Vec<ChainOutput>> {
    cc.validate()?;
    family.cfg.validate()?;
    family.prior.validate()?;
    family.sched.validate()?;
    (0..cc.n_chains)
        .into_par_iter()
        .map(|i| run_chain(family, data, cc, i))
        .collect()
}

/// Writes retained draws, one row per iteration.
pub fn write_draws_csv<W: std::io::Write>(chains: &[ChainOutput], names: &[String], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["chain".to_string(), "iteration".to_string()];
    header.extend(names.iter().cloned());
    header.extend(
        ["log_posterior", "obs_loglik", "accept_stat", "tree_depth", "n_leapfrog", "divergent", "step_size"]
            .map(String::from),
    );
    wr.write_record(&header)?;
    for c in chains {
        for i in c.retained() {
            let mut row = vec![c.chain.to_string(), i.to_string()];
            row.extend(c.theta[i].reported_values().iter().map(|x| format!("{x:.17e}")));
            let s = &c.stats[i];
            row.push(format!("{:.17e}", c.log_posterior[i]));
            row.push(format!("{:.17e}", c.obs_loglik[i]));
            row.push(format!("{:.17e}", s.accept_stat));
            row.push(s.depth.to_string());
            row.push(s.n_leapfrog.to_string());
            row.push(u8::from(s.divergent).to_string());
            row.push(format!("{:.17e}", s.step_size));
            wr.write_record(&row)?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// Writes the regime path of every retained iteration, one row per iteration.
pub fn write_regimes_csv<W: std::io::Write>(chains: &[ChainOutput], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for c in chains {
        for i in c.retained() {
            let mut row = vec![c.chain.to_string(), i.to_string()];
            row.extend(c.trajectories[i].iter().map(|z| z.s.to_string()));
            wr.write_record(&row)?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// Random initial point helper for tests and tools: a prior draw in unconstrained space.
pub fn prior_point<R: Rng + ?Sized>(family: &SeirFamily, rng: &mut R) -> Vec<f64> {
    family
        .prior
        .sample(family.cfg.layout(), rng)
        .to_unconstrained()
        .expect("prior draws are valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{DelayDistribution, IfrSchedule, Schedules};
    use crate::observation::ModelKind;
    use crate::params::{FixedConfig, PriorSpec};
    use crate::rng::seeded;

    fn family() -> SeirFamily {
        SeirFamily {
            cfg: FixedConfig::new(2, 100_000.0),
            sched: Schedules {
                nu: vec![],
                ifr: IfrSchedule::constant(0.01),
                ur: vec![],
                delay: DelayDistribution(vec![1.0 / 27.0; 27]),
            },
            prior: PriorSpec::default_for(2),
            kind: ModelKind::CasesAndDeaths,
        }
    }

    #[test]
    fn infeasible_trajectory_gives_minus_infinity() {
        let f = family();
        let theta = f.prior.sample(f.cfg.layout(), &mut seeded(1));
        let v = theta.to_unconstrained().unwrap();
        let path = vec![LatentState::new(2, 3), LatentState::new(2, 1)];
        let data = vec![Observation::missing(0), Observation::missing(1)];
        let (lp, _) = conditional_log_posterior(&f, &v, &path, &data, GradientMode::default()).unwrap();
        assert_eq!(lp, f64::NEG_INFINITY);
    }

    #[test]
    fn latent_path_term_matches_hsmm() {
        let f = family();
        let mut rng = seeded(4);
        let theta = f.prior.sample(f.cfg.layout(), &mut rng);
        let model = f.model(&theta);
        let mut z = model.sample_initial_latent(&mut rng);
        let mut path = vec![z];
        for _ in 0..60 {
            z = model.sample_latent(z, &mut rng);
            path.push(z);
        }
        let (a, _) = log_latent_path_grad(&theta, &f.cfg.init_destinations, &path);
        let b = model.log_latent_path(&path);
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn sensitivity_gradient_matches_differences() {
        let f = family();
        let mut rng = seeded(9);
        let theta = f.prior.sample(f.cfg.layout(), &mut rng);
        let model = f.model(&theta);
        let mut z = model.sample_initial_latent(&mut rng);
        let mut path = vec![z];
        for _ in 0..39 {
            z = model.sample_latent(z, &mut rng);
            path.push(z);
        }
        let data: Vec<Observation> = (0..40)
            .map(|t| Observation {
                t,
                cases: Some(3 * t as u64),
                deaths: Some(t as u64 / 10),
            })
            .collect();
        let v = theta.to_unconstrained().unwrap();
        let (_, g) = conditional_log_posterior(&f, &v, &path, &data, GradientMode::Sensitivity).unwrap();
        let (_, gfd) =
            conditional_log_posterior(&f, &v, &path, &data, GradientMode::FiniteDifference { step: 1e-5 }).unwrap();
        for (i, (a, b)) in g.iter().zip(&gfd).enumerate() {
            assert!((a - b).abs() <= 1e-3 * b.abs().max(1.0), "coordinate {i}: {a} vs {b}");
        }
    }
}
