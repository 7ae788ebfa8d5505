//! SEEIIR compartmental dynamics, the augmented Markov state, the death
//! convolution and the reproduction number.
//!
//! Each day is integrated with classical RK4 over `dt_substeps` equal
//! substeps. The day's new infections are the integral of the force of
//! infection `β S (I1 + I2) / N`, carried as a seventh ODE component.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsmm::{Hsmm, LatentState};
use crate::params::{FixedConfig, ThetaParams};

static CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Number of substeps so far in which a compartment went negative and was clamped.
pub fn clamp_events() -> u64 {
    CLAMP_EVENTS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdeState {
    pub s: f64,
    pub e1: f64,
    pub e2: f64,
    pub i1: f64,
    pub i2: f64,
    pub r: f64,
}

impl OdeState {
    /// `S = N − E0`, `E1 = E0`, everything else empty.
    pub fn initial(cfg: &FixedConfig) -> Self {
        Self {
            s: cfg.n_pop - cfg.initial_exposed,
            e1: cfg.initial_exposed,
            e2: 0.0,
            i1: 0.0,
            i2: 0.0,
            r: 0.0,
        }
    }

    pub fn total(&self) -> f64 {
        self.s + self.e1 + self.e2 + self.i1 + self.i2 + self.r
    }

    fn to_array(self) -> [f64; 6] {
        [self.s, self.e1, self.e2, self.i1, self.i2, self.r]
    }

    fn from_array(a: [f64; 6]) -> Self {
        Self {
            s: a[0],
            e1: a[1],
            e2: a[2],
            i1: a[3],
            i2: a[4],
            r: a[5],
        }
    }

    fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }
}

/// Rates that do not change with the regime.
#[derive(Debug, Clone, Copy)]
pub struct OdeRates {
    pub gamma1: f64,
    pub gamma2: f64,
    pub epsilon: f64,
    pub n_pop: f64,
    pub rho: f64,
    pub substeps: usize,
}

impl OdeRates {
    pub fn new(theta: &ThetaParams, cfg: &FixedConfig) -> Self {
        Self {
            gamma1: theta.gamma1,
            gamma2: theta.gamma2,
            epsilon: theta.epsilon,
            n_pop: cfg.n_pop,
            rho: cfg.rho,
            substeps: cfg.dt_substeps,
        }
    }
}

/// Compartments plus the incidence accumulator.
type Y = [f64; 7];
/// Sensitivities of (S, E1, E2, I1, I2, C) to one parameter.
pub type SensColumn = [f64; 6];

/// Which sensitivity column each parameter occupies.
#[derive(Debug, Clone, Copy)]
pub struct SensLayout {
    /// Number of `log_beta` columns; γ1, γ2, ε follow.
    pub k: usize,
}

impl SensLayout {
    pub fn columns(&self) -> usize {
        self.k + 3
    }
    pub fn gamma1(&self) -> usize {
        self.k
    }
    pub fn gamma2(&self) -> usize {
        self.k + 1
    }
    pub fn epsilon(&self) -> usize {
        self.k + 2
    }
}

fn rhs(y: &Y, beta: f64, vac: f64, p: &OdeRates) -> Y {
    let inf = y[3] + y[4];
    let force = beta * y[0] * inf / p.n_pop;
    [
        -force - vac,
        force - p.epsilon * y[1],
        p.epsilon * (y[1] - y[2]),
        p.epsilon * y[2] - p.gamma1 * y[3],
        p.gamma1 * y[3] - p.gamma2 * y[4],
        p.gamma2 * y[4] + vac,
        force,
    ]
}

/// Right-hand side of the forward-sensitivity system for every column.
fn sens_rhs(
    y: &Y,
    sens: &[SensColumn],
    out: &mut [SensColumn],
    beta: f64,
    beta_col: usize,
    p: &OdeRates,
    lay: SensLayout,
) {
    let inf = y[3] + y[4];
    let a = beta * inf / p.n_pop;
    let b = beta * y[0] / p.n_pop;
    let force = b * inf;
    for (c, (sc, o)) in sens.iter().zip(out.iter_mut()).enumerate() {
        let mut l = a * sc[0] + b * (sc[3] + sc[4]);
        if c == beta_col {
            l += force;
        }
        let mut d = [
            -l,
            l - p.epsilon * sc[1],
            p.epsilon * (sc[1] - sc[2]),
            p.epsilon * sc[2] - p.gamma1 * sc[3],
            p.gamma1 * sc[3] - p.gamma2 * sc[4],
            l,
        ];
        if c == lay.epsilon() {
            d[1] -= y[1];
            d[2] += y[1] - y[2];
            d[3] += y[2];
        } else if c == lay.gamma1() {
            d[3] -= y[3];
            d[4] += y[3];
        } else if c == lay.gamma2() {
            d[4] -= y[4];
        }
        *o = d;
    }
}

fn axpy(y: &Y, h: f64, k: &Y) -> Y {
    let mut o = *y;
    for i in 0..7 {
        o[i] += h * k[i];
    }
    o
}

/// Clamps negative compartments to zero and rescales the rest to `n_pop`.
/// Returns true if anything was clamped.
fn guard(y: &mut Y, n_pop: f64) -> bool {
    if y[..6].iter().all(|&v| v >= 0.0) {
        return false;
    }
    for v in y[..6].iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let total: f64 = y[..6].iter().sum();
    if total > 0.0 {
        let f = n_pop / total;
        for v in y[..6].iter_mut() {
            *v *= f;
        }
    }
    CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
    true
}

/// Integrates one day. With `sens` supplied, the sensitivity columns are
/// advanced with the same RK4 stages so they are the exact derivative of the
/// discrete map (away from clamping events).
fn integrate_day(
    o: OdeState,
    beta: f64,
    beta_col: usize,
    vac: f64,
    p: &OdeRates,
    mut sens: Option<(&mut [SensColumn], SensLayout)>,
) -> (OdeState, f64) {
    let a = o.to_array();
    let mut y: Y = [a[0], a[1], a[2], a[3], a[4], a[5], 0.0];
    let h = 1.0 / p.substeps as f64;
    let ncol = sens.as_ref().map_or(0, |(s, _)| s.len());
    let mut tmp: Vec<SensColumn> = vec![[0.0; 6]; ncol];
    let mut ks: [Vec<SensColumn>; 4] = std::array::from_fn(|_| vec![[0.0; 6]; ncol]);
    for _ in 0..p.substeps {
        let k1 = rhs(&y, beta, vac, p);
        let y2 = axpy(&y, 0.5 * h, &k1);
        let k2 = rhs(&y2, beta, vac, p);
        let y3 = axpy(&y, 0.5 * h, &k2);
        let k3 = rhs(&y3, beta, vac, p);
        let y4 = axpy(&y, h, &k3);
        let k4 = rhs(&y4, beta, vac, p);
        if let Some((s, lay)) = sens.as_mut() {
            let lay = *lay;
            let stage = |base: &[SensColumn], inc: &[SensColumn], f: f64, out: &mut [SensColumn]| {
                for ((o, b), i) in out.iter_mut().zip(base).zip(inc) {
                    for j in 0..6 {
                        o[j] = b[j] + f * i[j];
                    }
                }
            };
            sens_rhs(&y, s, &mut ks[0], beta, beta_col, p, lay);
            stage(s, &ks[0], 0.5 * h, &mut tmp);
            sens_rhs(&y2, &tmp, &mut ks[1], beta, beta_col, p, lay);
            stage(s, &ks[1], 0.5 * h, &mut tmp);
            sens_rhs(&y3, &tmp, &mut ks[2], beta, beta_col, p, lay);
            stage(s, &ks[2], h, &mut tmp);
            sens_rhs(&y4, &tmp, &mut ks[3], beta, beta_col, p, lay);
            for (c, col) in s.iter_mut().enumerate() {
                for j in 0..6 {
                    col[j] += h / 6.0
                        * (ks[0][c][j] + 2.0 * ks[1][c][j] + 2.0 * ks[2][c][j] + ks[3][c][j]);
                }
            }
        }
        for i in 0..7 {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if guard(&mut y, p.n_pop) {
            if let Some((s, _)) = sens.as_mut() {
                for col in s.iter_mut() {
                    for (j, idx) in [0usize, 1, 2, 3, 4].into_iter().enumerate() {
                        if y[idx] == 0.0 {
                            col[j] = 0.0;
                        }
                    }
                }
            }
        }
    }
    let out = OdeState::from_array([y[0], y[1], y[2], y[3], y[4], y[5]]);
    (out, y[6].max(0.0))
}

/// Advances the compartments by one day under transmission rate `beta` and
/// lagged first vaccinations `nu_lagged`; returns the new state and the
/// day's new infections.
pub fn ode_step(
    o: OdeState,
    beta: f64,
    theta: &ThetaParams,
    cfg: &FixedConfig,
    nu_lagged: f64,
) -> Result<(OdeState, f64)> {
    ode_step_rates(o, beta, &OdeRates::new(theta, cfg), nu_lagged, 0)
}

pub(crate) fn ode_step_rates(
    o: OdeState,
    beta: f64,
    rates: &OdeRates,
    nu_lagged: f64,
    day: usize,
) -> Result<(OdeState, f64)> {
    let (next, inc) = integrate_day(o, beta, usize::MAX, rates.rho * nu_lagged, rates, None);
    if !next.is_finite() || !inc.is_finite() {
        return Err(Error::Numerical {
            day,
            state: format!("{next:?}"),
        });
    }
    Ok((next, inc))
}

/// [`ode_step`] with forward sensitivities. `sens` holds d(S,E1,E2,I1,I2,C)/dparam
/// where C is incidence accumulated within the day; on return the C entries
/// hold the derivatives of the day's incidence.
pub(crate) fn ode_step_sens(
    o: OdeState,
    beta: f64,
    beta_col: usize,
    rates: &OdeRates,
    nu_lagged: f64,
    sens: &mut [SensColumn],
    lay: SensLayout,
) -> (OdeState, f64) {
    for col in sens.iter_mut() {
        col[5] = 0.0;
    }
    integrate_day(o, beta, beta_col, rates.rho * nu_lagged, rates, Some((sens, lay)))
}

/// Probabilities of infection-to-death lags 1, 2, …, window−1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayDistribution(pub Vec<f64>);

impl DelayDistribution {
    /// Probability of lag `k ≥ 1`; zero past the end.
    pub fn at_lag(&self, k: usize) -> f64 {
        if k == 0 {
            0.0
        } else {
            self.0.get(k - 1).copied().unwrap_or(0.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Validation("delay probabilities must be non-negative".into()));
        }
        if self.0.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(Error::Validation("delay probabilities sum above 1".into()));
        }
        Ok(())
    }
}

/// Infection-fatality ratio as a step function of the day index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IfrSchedule {
    /// First day index of each segment after the first, increasing.
    pub change_days: Vec<usize>,
    /// One more value than change days.
    pub values: Vec<f64>,
}

impl IfrSchedule {
    pub fn constant(v: f64) -> Self {
        Self {
            change_days: vec![],
            values: vec![v],
        }
    }

    pub fn at(&self, t: usize) -> f64 {
        let seg = self.change_days.partition_point(|&d| d <= t);
        self.values[seg]
    }
}

/// Time-varying inputs to the dynamics and observation model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedules {
    /// Daily first vaccinations.
    pub nu: Vec<f64>,
    pub ifr: IfrSchedule,
    /// Under-reporting score per day.
    pub ur: Vec<f64>,
    pub delay: DelayDistribution,
}

fn held(series: &[f64], t: usize, empty: f64) -> f64 {
    match series.len() {
        0 => empty,
        n => series[t.min(n - 1)],
    }
}

impl Schedules {
    pub fn validate(&self) -> Result<()> {
        self.delay.validate()?;
        if self.ifr.values.len() != self.ifr.change_days.len() + 1 {
            return Err(Error::Validation("ifr needs one value per segment".into()));
        }
        if self.ifr.values.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::Validation("ifr values must lie in (0, 1)".into()));
        }
        if self.ur.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
            return Err(Error::Validation("ur values must lie in (0, 1]".into()));
        }
        if self.nu.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Validation("vaccinations must be non-negative".into()));
        }
        Ok(())
    }

    /// ν_{t−U}, zero before the delay has elapsed; held at the last value past the data.
    pub fn nu_lagged(&self, t: usize, delay: usize) -> f64 {
        if t < delay {
            0.0
        } else {
            held(&self.nu, t - delay, 0.0)
        }
    }

    pub fn ur_at(&self, t: usize) -> f64 {
        held(&self.ur, t, 1.0)
    }

    pub fn ifr_at(&self, t: usize) -> f64 {
        self.ifr.at(t)
    }
}

/// `(O_t, z_t, c^i_{t−window+1..t})`: Markov under the delayed death model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub ode: OdeState,
    pub z: LatentState,
    /// Model-implied daily incidence, most recent last.
    pub hist: Vec<f64>,
}

impl AugmentedState {
    /// The pre-observation state: initial compartments and an empty history.
    /// `z` is a placeholder until the first latent draw.
    pub fn initial(cfg: &FixedConfig) -> Self {
        Self {
            ode: OdeState::initial(cfg),
            z: LatentState::new(cfg.k, 0),
            hist: vec![0.0; cfg.window],
        }
    }

    pub fn latest_incidence(&self) -> f64 {
        *self.hist.last().unwrap_or(&0.0)
    }

    fn push_incidence(&mut self, c: f64) {
        let n = self.hist.len();
        if n == 0 {
            return;
        }
        self.hist.copy_within(1.., 0);
        self.hist[n - 1] = c;
    }
}

/// Index into `log_beta` used by regime `s`.
pub fn beta_index(s: usize, cfg: &FixedConfig) -> usize {
    if s >= cfg.k {
        cfg.init_beta_index
    } else {
        s
    }
}

pub fn regime_beta(s: usize, theta: &ThetaParams, cfg: &FixedConfig) -> f64 {
    theta.log_beta[beta_index(s, cfg)].exp()
}

/// Applies a given latent draw: solves the ODE for day `t` and shifts the
/// incidence window.
pub fn advance_with(
    x: &AugmentedState,
    z_new: LatentState,
    rates: &OdeRates,
    theta: &ThetaParams,
    cfg: &FixedConfig,
    sched: &Schedules,
    t: usize,
) -> Result<AugmentedState> {
    let beta = regime_beta(z_new.s, theta, cfg);
    let nu = sched.nu_lagged(t, cfg.vaccine_delay);
    let (ode, inc) = ode_step_rates(x.ode, beta, rates, nu, t)?;
    let mut next = AugmentedState {
        ode,
        z: z_new,
        hist: x.hist.clone(),
    };
    next.push_incidence(inc);
    Ok(next)
}

/// One step of the augmented process: latent transition, then ODE and history.
#[allow(clippy::too_many_arguments)]
pub fn advance<R: Rng + ?Sized>(
    x: &AugmentedState,
    hsmm: &Hsmm,
    theta: &ThetaParams,
    cfg: &FixedConfig,
    sched: &Schedules,
    t: usize,
    rng: &mut R,
) -> Result<AugmentedState> {
    let z_new = hsmm.step_latent(x.z, rng);
    advance_with(x, z_new, &OdeRates::new(theta, cfg), theta, cfg, sched, t)
}

/// Model-implied deaths today from the incidence window (most recent last).
pub fn implied_deaths(hist: &[f64], ifr_t: f64, delay: &DelayDistribution) -> f64 {
    let n = hist.len();
    let mut acc = 0.0;
    for k in 1..n {
        acc += hist[n - 1 - k] * delay.at_lag(k);
    }
    ifr_t * acc
}

/// `β (1/γ1 + 1/γ2) S / N`: expected infections over both infectious stages.
pub fn reproduction_number(o: &OdeState, beta: f64, theta: &ThetaParams, cfg: &FixedConfig) -> f64 {
    beta * (1.0 / theta.gamma1 + 1.0 / theta.gamma2) * o.s / cfg.n_pop
}
