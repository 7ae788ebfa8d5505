//! Negative Binomial helpers shared by the duration and observation models.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use statrs::function::gamma::ln_gamma;

/// log pmf of NB(size, prob) on {0, 1, …}: C(y+size−1, y) prob^size (1−prob)^y.
pub fn nb_logpmf(y: f64, size: f64, prob: f64) -> f64 {
    if y < 0.0 {
        return f64::NEG_INFINITY;
    }
    let tail = if y == 0.0 { 0.0 } else { y * (1.0 - prob).ln() };
    ln_gamma(y + size) - ln_gamma(size) - ln_gamma(y + 1.0) + size * prob.ln() + tail
}

/// Draws from NB(size, prob) as a Gamma–Poisson mixture.
pub fn sample_nb<R: Rng + ?Sized>(size: f64, prob: f64, rng: &mut R) -> u64 {
    let scale = (1.0 - prob) / prob;
    if !(scale > 0.0) {
        return 0;
    }
    let lambda: f64 = Gamma::new(size, scale).unwrap().sample(rng);
    sample_poisson(lambda, rng)
}

pub fn sample_poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> u64 {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return 0;
    }
    let y: f64 = Poisson::new(lambda).unwrap().sample(rng);
    y as u64
}

/// Numerically stable log(Σ exp(x)).
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_one_is_geometric() {
        let psi: f64 = 0.3;
        for d in 0..20 {
            let exact = (psi * (1.0 - psi).powi(d)).ln();
            assert!((nb_logpmf(d as f64, 1.0, psi) - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn lse_handles_all_neg_inf() {
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
    }
}
