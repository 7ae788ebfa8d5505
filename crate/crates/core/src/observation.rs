//! Negative Binomial observation densities for reported cases and deaths.
//!
//! Both channels use the mean–variance form NB(μ, μ + μ²/φ). In standard
//! form that is size φ and success probability φ/(φ + μ).

use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;

use crate::dist::nb_logpmf;
use crate::dynamics::{implied_deaths, AugmentedState, Schedules};
use crate::error::{Error, Result};
use crate::params::ThetaParams;

/// One day of reported data; a `None` channel is missing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub t: usize,
    pub cases: Option<u64>,
    pub deaths: Option<u64>,
}

impl Observation {
    pub fn missing(t: usize) -> Self {
        Self {
            t,
            cases: None,
            deaths: None,
        }
    }
}

/// Which reported channels enter the likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    DeathsOnly,
    #[default]
    CasesAndDeaths,
}

impl ModelKind {
    pub fn uses_cases(self) -> bool {
        matches!(self, ModelKind::CasesAndDeaths)
    }
}

/// log pmf of the Negative Binomial with the given mean and variance.
pub fn nb_alt_logpmf(y: u64, mu: f64, variance: f64) -> Result<f64> {
    if !(mu > 0.0) || !(variance > mu) {
        return Err(Error::Domain(format!(
            "need 0 < mu < variance, got mu = {mu}, variance = {variance}"
        )));
    }
    let (size, prob) = nb_alt_standard(mu, variance);
    Ok(nb_logpmf(y as f64, size, prob))
}

/// (size, prob) of NB with mean `mu` and variance `variance`.
pub fn nb_alt_standard(mu: f64, variance: f64) -> (f64, f64) {
    (mu * mu / (variance - mu), mu / variance)
}

pub fn nb_alt_variance(mu: f64, phi: f64) -> f64 {
    mu + mu * mu / phi
}

/// log NB(y; mean μ, overdispersion φ), with the zero-mean limit.
pub fn nb_mean_phi_logpmf(y: u64, mu: f64, phi: f64) -> f64 {
    if !(mu > 0.0) {
        return if y == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    nb_logpmf(y as f64, phi, phi / (phi + mu))
}

/// Value and partial derivatives (∂/∂μ, ∂/∂φ) of [`nb_mean_phi_logpmf`].
pub fn nb_mean_phi_term(y: u64, mu: f64, phi: f64) -> (f64, f64, f64) {
    if !(mu > 0.0) {
        return if y == 0 {
            (0.0, 0.0, 0.0)
        } else {
            (f64::NEG_INFINITY, 0.0, 0.0)
        };
    }
    let yf = y as f64;
    let val = nb_logpmf(yf, phi, phi / (phi + mu));
    let dmu = yf / mu - (yf + phi) / (phi + mu);
    let dphi = digamma(yf + phi) - digamma(phi) + (phi / (phi + mu)).ln() + 1.0 - (yf + phi) / (phi + mu);
    (val, dmu, dphi)
}

/// Mean of reported cases for a state on day `t`.
pub fn expected_cases(x: &AugmentedState, sched: &Schedules, t: usize) -> f64 {
    x.latest_incidence() * sched.ur_at(t)
}

pub fn expected_deaths(x: &AugmentedState, sched: &Schedules, t: usize) -> f64 {
    implied_deaths(&x.hist, sched.ifr_at(t), &sched.delay)
}

/// Log observation density of `obs` given the augmented state on day `obs.t`.
pub fn log_obs(
    obs: &Observation,
    x: &AugmentedState,
    theta: &ThetaParams,
    sched: &Schedules,
    kind: ModelKind,
) -> f64 {
    let mut lp = 0.0;
    if kind.uses_cases() {
        if let Some(y) = obs.cases {
            lp += nb_mean_phi_logpmf(y, expected_cases(x, sched, obs.t), theta.phi_cases);
        }
    }
    if let Some(y) = obs.deaths {
        lp += nb_mean_phi_logpmf(y, expected_deaths(x, sched, obs.t), theta.phi_deaths);
    }
    lp
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{DelayDistribution, IfrSchedule};
    use crate::hsmm::LatentState;
    use crate::params::FixedConfig;

    fn theta() -> ThetaParams {
        ThetaParams {
            log_beta: vec![-1.72, -1.36, -0.81, 0.45],
            gamma1: 0.45,
            gamma2: 0.46,
            epsilon: 0.94,
            p: vec![0.87, 0.5, 0.17],
            p_init: vec![0.35, 0.35, 0.30],
            r: vec![36.12, 24.19, 14.19, 28.13, 28.0],
            psi: vec![0.76, 0.75, 0.55, 0.5, 0.5],
            phi_cases: 4.91,
            phi_deaths: 5.25,
        }
    }

    fn state() -> (AugmentedState, Schedules) {
        let cfg = FixedConfig::new(4, 1e6);
        let mut x = AugmentedState::initial(&cfg);
        x.z = LatentState::new(1, 2);
        x.hist = (0..28).map(|i| 100.0 + 10.0 * i as f64).collect();
        let sched = Schedules {
            nu: vec![],
            ifr: IfrSchedule::constant(0.01),
            ur: vec![0.4; 50],
            delay: DelayDistribution(vec![1.0 / 27.0; 27]),
        };
        (x, sched)
    }

    #[test]
    fn alt_parameterisation_algebra() {
        let v = nb_alt_variance(10.0, 5.0);
        assert_eq!(v, 30.0);
        let (size, prob) = nb_alt_standard(10.0, v);
        assert!((size - 5.0).abs() < 1e-12);
        assert!((prob - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn domain_error_without_overdispersion() {
        assert!(matches!(nb_alt_logpmf(3, 10.0, 10.0), Err(Error::Domain(_))));
        assert!(matches!(nb_alt_logpmf(3, 10.0, 5.0), Err(Error::Domain(_))));
    }

    #[test]
    fn pmf_normalises() {
        let var = nb_alt_variance(100.0, 4.91);
        let s: f64 = (0..1_000_000u64).map(|y| nb_alt_logpmf(y, 100.0, var).unwrap().exp()).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn poisson_limit() {
        let mu = 250.0;
        assert!(nb_alt_variance(mu, 1e8) - mu < 1e-4 * mu);
    }

    #[test]
    fn log_obs_channels() {
        let (x, sched) = state();
        let t = theta();
        assert_eq!(log_obs(&Observation::missing(5), &x, &t, &sched, ModelKind::CasesAndDeaths), 0.0);
        let obs = Observation {
            t: 5,
            cases: Some(120),
            deaths: Some(2),
        };
        let deaths_only = log_obs(&obs, &x, &t, &sched, ModelKind::DeathsOnly);
        let mu_d = expected_deaths(&x, &sched, 5);
        let direct_d = nb_alt_logpmf(2, mu_d, nb_alt_variance(mu_d, t.phi_deaths)).unwrap();
        assert!((deaths_only - direct_d).abs() < 1e-12);
        let joint = log_obs(&obs, &x, &t, &sched, ModelKind::CasesAndDeaths);
        let mu_c = 370.0 * 0.4;
        let direct_c = nb_alt_logpmf(120, mu_c, nb_alt_variance(mu_c, t.phi_cases)).unwrap();
        assert!((joint - (direct_c + direct_d)).abs() < 1e-12);
    }

    #[test]
    fn zero_mean_guard() {
        assert_eq!(nb_mean_phi_logpmf(0, 0.0, 5.0), 0.0);
        assert_eq!(nb_mean_phi_logpmf(3, 0.0, 5.0), f64::NEG_INFINITY);
    }

    #[test]
    fn term_derivatives_match_differences() {
        for &(y, mu, phi) in &[(0u64, 3.0, 5.0), (17, 12.5, 4.9), (400, 350.0, 2.0)] {
            let (_, dmu, dphi) = nb_mean_phi_term(y, mu, phi);
            let h = 1e-6;
            let fd_mu = (nb_mean_phi_logpmf(y, mu + h, phi) - nb_mean_phi_logpmf(y, mu - h, phi)) / (2.0 * h);
            let fd_phi = (nb_mean_phi_logpmf(y, mu, phi + h) - nb_mean_phi_logpmf(y, mu, phi - h)) / (2.0 * h);
            assert!((dmu - fd_mu).abs() < 1e-6 * (1.0 + fd_mu.abs()));
            assert!((dphi - fd_phi).abs() < 1e-6 * (1.0 + fd_phi.abs()));
        }
    }
}
