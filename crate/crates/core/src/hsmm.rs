//! Explicit-duration hidden semi-Markov regime process.
//!
//! The latent state is a pair `(s, d)`: the regime and the number of full
//! days remaining in it. While `d > 0` the chain decrements `d`; at `d = 0`
//! a successor regime is drawn from the transition structure and a fresh
//! remaining duration from that regime's Negative Binomial.
//!
//! Regimes `0..K` are recurring and ordered by transmission rate. Index `K`
//! is the non-recurring initial regime, only ever occupied at the start.
//! Successors follow an adjacent-move chain: from regime `i < K−1` move up
//! with probability `p[i]`, otherwise move down (regime 0 re-enters itself);
//! the top regime always moves down.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{nb_logpmf, sample_nb};
use crate::params::ThetaParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentState {
    /// Regime index; `K` is the initial regime.
    pub s: usize,
    /// Remaining full days in the regime.
    pub d: u32,
}

impl LatentState {
    pub const fn new(s: usize, d: u32) -> Self {
        Self { s, d }
    }
}

/// Per-regime successor distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionStructure {
    /// `rows[i][j]` = P(next regime j | leaving regime i); K+1 rows and columns.
    pub rows: Vec<Vec<f64>>,
}

impl TransitionStructure {
    pub fn new(theta: &ThetaParams, init_destinations: &[usize]) -> Self {
        let k = theta.log_beta.len();
        let mut rows = vec![vec![0.0; k + 1]; k + 1];
        for i in 0..k {
            if i + 1 == k {
                rows[i][k - 2] = 1.0;
            } else {
                let up = theta.p[i];
                rows[i][i + 1] = up;
                rows[i][i.saturating_sub(1)] += 1.0 - up;
            }
        }
        for (&dest, &w) in init_destinations.iter().zip(&theta.p_init) {
            rows[k][dest] += w;
        }
        Self { rows }
    }

    pub fn k(&self) -> usize {
        self.rows.len() - 1
    }
}

/// The regime process for one parameter value.
#[derive(Debug, Clone)]
pub struct Hsmm {
    pub transitions: TransitionStructure,
    log_rows: Vec<Vec<f64>>,
    r: Vec<f64>,
    psi: Vec<f64>,
}

impl Hsmm {
    pub fn new(theta: &ThetaParams, init_destinations: &[usize]) -> Self {
        let transitions = TransitionStructure::new(theta, init_destinations);
        let log_rows = transitions
            .rows
            .iter()
            .map(|r| r.iter().map(|p| p.ln()).collect())
            .collect();
        Self {
            transitions,
            log_rows,
            r: theta.r.clone(),
            psi: theta.psi.clone(),
        }
    }

    pub fn k(&self) -> usize {
        self.transitions.k()
    }

    /// log pmf of the remaining duration drawn on entry to `s`.
    pub fn duration_logpmf(&self, d: u32, s: usize) -> f64 {
        duration_logpmf(d, self.r[s], self.psi[s])
    }

    pub fn sample_duration<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> u32 {
        sample_nb(self.r[s], self.psi[s], rng).min(u32::MAX as u64) as u32
    }

    pub fn initial_latent<R: Rng + ?Sized>(&self, rng: &mut R) -> LatentState {
        let s = self.k();
        LatentState::new(s, self.sample_duration(s, rng))
    }

    pub fn log_initial(&self, z: LatentState) -> f64 {
        if z.s != self.k() {
            return f64::NEG_INFINITY;
        }
        self.duration_logpmf(z.d, z.s)
    }

    pub fn sample_successor<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        let row = &self.transitions.rows[s];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (j, &p) in row.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last = j;
                if u < acc {
                    return j;
                }
            }
        }
        last
    }

    pub fn step_latent<R: Rng + ?Sized>(&self, z_prev: LatentState, rng: &mut R) -> LatentState {
        if z_prev.d > 0 {
            return LatentState::new(z_prev.s, z_prev.d - 1);
        }
        let s = self.sample_successor(z_prev.s, rng);
        LatentState::new(s, self.sample_duration(s, rng))
    }

    /// Exact log of the one-step kernel p(z_new | z_prev).
    pub fn log_transition(&self, z_new: LatentState, z_prev: LatentState) -> f64 {
        if z_prev.d > 0 {
            if z_new.s == z_prev.s && z_new.d + 1 == z_prev.d {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        } else {
            if z_new.s >= self.log_rows.len() {
                return f64::NEG_INFINITY;
            }
            self.log_rows[z_prev.s][z_new.s] + self.duration_logpmf(z_new.d, z_new.s)
        }
    }

    /// log p(z_{0..T}) of a whole path, starting from the initial regime.
    pub fn log_path(&self, path: &[LatentState]) -> f64 {
        let Some(first) = path.first() else {
            return 0.0;
        };
        let mut lp = self.log_initial(*first);
        for w in path.windows(2) {
            lp += self.log_transition(w[1], w[0]);
            if lp == f64::NEG_INFINITY {
                break;
            }
        }
        lp
    }
}

/// log pmf of NB(size r, success probability psi) at remaining duration `d`.
pub fn duration_logpmf(d: u32, r: f64, psi: f64) -> f64 {
    nb_logpmf(d as f64, r, psi)
}

/// True when the path obeys the forced-decrement rule and never re-enters
/// the initial regime.
pub fn is_feasible(path: &[LatentState], k: usize) -> bool {
    let Some(first) = path.first() else {
        return true;
    };
    if first.s > k {
        return false;
    }
    path.windows(2).all(|w| {
        let (a, b) = (w[0], w[1]);
        if a.d > 0 {
            b.s == a.s && b.d + 1 == a.d
        } else {
            b.s < k && (b.s != a.s || a.s == 0)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamLayout, PriorSpec};
    use crate::rng::seeded;

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

    fn hsmm() -> Hsmm {
        Hsmm::new(&theta(), &[0, 1, 2])
    }

    #[test]
    fn decrement_branch_is_deterministic() {
        let h = hsmm();
        let mut rng = seeded(1);
        for _ in 0..100 {
            assert_eq!(h.step_latent(LatentState::new(2, 5), &mut rng), LatentState::new(2, 4));
        }
        assert_eq!(h.log_transition(LatentState::new(1, 2), LatentState::new(1, 3)), 0.0);
        assert_eq!(
            h.log_transition(LatentState::new(2, 4), LatentState::new(1, 3)),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn top_regime_moves_down() {
        let h = hsmm();
        let mut rng = seeded(2);
        for _ in 0..1000 {
            assert_eq!(h.step_latent(LatentState::new(3, 0), &mut rng).s, 2);
        }
    }

    #[test]
    fn rows_sum_to_one_and_initial_row_has_no_self_mass() {
        let prior = PriorSpec::default_for(4);
        let mut rng = seeded(9);
        for _ in 0..1000 {
            let t = prior.sample(ParamLayout::new(4, 3), &mut rng);
            let ts = TransitionStructure::new(&t, &[0, 1, 2]);
            for row in &ts.rows {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            assert_eq!(ts.rows[4][4], 0.0);
        }
    }

    #[test]
    fn successor_frequencies_match_row() {
        let h = hsmm();
        let mut rng = seeded(77);
        let n = 100_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            counts[h.step_latent(LatentState::new(1, 0), &mut rng).s] += 1;
        }
        for (j, &c) in counts.iter().enumerate() {
            let p = h.transitions.rows[1][j];
            let se = (p * (1.0 - p) / n as f64).sqrt();
            let f = c as f64 / n as f64;
            assert!((f - p).abs() <= 3.0 * se + 1e-12, "regime {j}: {f} vs {p}");
        }
    }

    #[test]
    fn renewal_branch_sums_to_row_probability() {
        let h = hsmm();
        let prev = LatentState::new(1, 0);
        let total: f64 = (0..10_000)
            .map(|d| h.log_transition(LatentState::new(2, d), prev).exp())
            .sum();
        assert!((total - h.transitions.rows[1][2]).abs() < 1e-10);
    }

    #[test]
    fn duration_pmf_normalises() {
        let s: f64 = (0..100_000).map(|d| duration_logpmf(d, 36.12, 0.76).exp()).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn duration_sample_mean() {
        let (r, psi) = (14.19, 0.55);
        let mut t = theta();
        t.r[2] = r;
        t.psi[2] = psi;
        let h = Hsmm::new(&t, &[0, 1, 2]);
        let mut rng = seeded(5);
        let n = 1_000_000;
        let xs: Vec<f64> = (0..n).map(|_| h.sample_duration(2, &mut rng) as f64).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let analytic = r * (1.0 - psi) / psi;
        let var = r * (1.0 - psi) / (psi * psi);
        assert!((mean - analytic).abs() < 3.0 * (var / n as f64).sqrt());
        assert!((analytic - 11.6).abs() < 0.05);
    }

    #[test]
    fn initial_regime_and_degenerate_duration() {
        let mut t = theta();
        t.psi[4] = 1.0 - 1e-15;
        let h = Hsmm::new(&t, &[0, 1, 2]);
        let mut rng = seeded(8);
        for _ in 0..1000 {
            let z = h.initial_latent(&mut rng);
            assert_eq!(z, LatentState::new(4, 0));
        }
    }

    #[test]
    fn paths_never_reenter_initial() {
        let h = hsmm();
        let mut rng = seeded(11);
        for _ in 0..10_000 {
            let mut z = h.initial_latent(&mut rng);
            let mut path = vec![z];
            let mut left = false;
            for _ in 0..500 {
                z = h.step_latent(z, &mut rng);
                if z.s != 4 {
                    left = true;
                }
                assert!(!(left && z.s == 4));
                path.push(z);
            }
            assert!(is_feasible(&path, 4));
        }
    }
}
