//! Independent oracles used by the integration and acceptance tests.
#![allow(dead_code)]

use epismc_core::hsmm::LatentState;
use epismc_core::toy::{ToyModel, ToyObs};
use epismc_core::ThetaParams;

/// Exact log-likelihood of a toy model by the forward algorithm over the
/// finite (regime, remaining duration) chain.
pub fn forward_loglik(m: &ToyModel, data: &[ToyObs]) -> f64 {
    let k = m.means.len();
    let nd = m.durations[0].len();
    let idx = |s: usize, d: usize| s * nd + d;
    let mut alpha = vec![0.0; k * nd];
    for s in 0..k {
        for d in 0..nd {
            alpha[idx(s, d)] = m.init[s] * m.durations[s][d];
        }
    }
    let mut ll = 0.0;
    for (t, y) in data.iter().enumerate() {
        if t > 0 {
            let mut next = vec![0.0; k * nd];
            for s in 0..k {
                for d in 0..nd {
                    let a = alpha[idx(s, d)];
                    if a == 0.0 {
                        continue;
                    }
                    if d > 0 {
                        next[idx(s, d - 1)] += a;
                    } else {
                        for j in 0..k {
                            for e in 0..nd {
                                next[idx(j, e)] += a * m.trans[s][j] * m.durations[j][e];
                            }
                        }
                    }
                }
            }
            alpha = next;
        }
        if let Some(v) = y.0 {
            for s in 0..k {
                let z = (v - m.means[s]) / m.sigma;
                let g = (-0.5 * z * z).exp() / (m.sigma * (2.0 * std::f64::consts::PI).sqrt());
                for d in 0..nd {
                    alpha[idx(s, d)] *= g;
                }
            }
        }
        let c: f64 = alpha.iter().sum();
        ll += c.ln();
        alpha.iter_mut().for_each(|a| *a /= c);
    }
    ll
}

/// Path log-density of the day-by-day HMM with geometric dwell times:
/// leave regime s with probability ψ_s each day, then move by `rows`.
/// The final remaining duration adds an independent geometric term.
pub fn geometric_hmm_log_path(rows: &[Vec<f64>], psi: &[f64], path: &[LatentState]) -> f64 {
    let mut lp = 0.0;
    for w in path.windows(2) {
        let (a, b) = (w[0], w[1]);
        if a.d > 0 {
            lp += (1.0 - psi[a.s]).ln();
        } else {
            lp += psi[a.s].ln() + rows[a.s][b.s].ln();
        }
    }
    // Remaining time of the last regime, beyond the horizon.
    let last = path[path.len() - 1];
    lp += psi[last.s].ln() + last.d as f64 * (1.0 - psi[last.s]).ln();
    lp
}

/// Two-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d = ks_statistic(a, b);
    (d, ks_pvalue(d, a.len() as f64, b.len() as f64))
}

/// sup |F_a − F_b| over the pooled sample.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d
}

/// Asymptotic p-value of statistic `d` for sample sizes `n` and `m`; either
/// may be an effective size for autocorrelated draws.
pub fn ks_pvalue(d: f64, n: f64, m: f64) -> f64 {
    let ne = n * m / (n + m);
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    kolmogorov_q(lambda)
}

/// Q(λ) = 2 Σ (−1)^{k−1} exp(−2k²λ²).
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

pub fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

/// Toy data from a seeded simulation.
pub fn toy_data(m: &ToyModel, t_len: usize, seed: u64) -> Vec<ToyObs> {
    let (_, ys) = m.simulate(t_len, &mut epismc_core::seeded(seed));
    ys.into_iter().map(|y| ToyObs(Some(y))).collect()
}

/// Successor matrix written out from the adjacency rule: the lowest regime
/// renews into itself on a down move, the highest always moves down, and the
/// initial regime spreads over its destinations.
pub fn adjacent_rows(theta: &ThetaParams, dests: &[usize]) -> Vec<Vec<f64>> {
    let k = theta.log_beta.len();
    let mut rows = vec![vec![0.0; k + 1]; k + 1];
    for s in 0..k {
        if s == k - 1 {
            rows[s][s - 1] = 1.0;
        } else if s == 0 {
            rows[0][1] = theta.p[0];
            rows[0][0] = 1.0 - theta.p[0];
        } else {
            rows[s][s + 1] = theta.p[s];
            rows[s][s - 1] = 1.0 - theta.p[s];
        }
    }
    for (&d, &w) in dests.iter().zip(&theta.p_init) {
        rows[k][d] += w;
    }
    rows
}
