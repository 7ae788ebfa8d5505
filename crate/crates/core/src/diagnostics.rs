//! MCMC summaries: split-R̂, batch-means Monte Carlo standard error,
//! and empirical quantiles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability levels of the summary quantile columns.
pub const SUMMARY_LEVELS: [f64; 5] = [0.025, 0.25, 0.5, 0.75, 0.975];

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance with denominator n − 1 (zero for fewer than two values).
pub fn variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
}

/// Linear-interpolation quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantiles(x: &[f64], levels: &[f64]) -> Vec<f64> {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    levels.iter().map(|&p| quantile_sorted(&s, p)).collect()
}

/// Split-R̂: every chain is halved and the potential scale reduction is
/// computed over the 2m half-chains.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let mut halves: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let h = c.len() / 2;
        if h < 2 {
            return f64::NAN;
        }
        halves.push(&c[..h]);
        halves.push(&c[c.len() - h..]);
    }
    let n = halves.iter().map(|h| h.len()).min().unwrap_or(0) as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let w = mean(&halves.iter().map(|h| variance(h)).collect::<Vec<_>>());
    let b = n * variance(&means);
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

/// Batch-means MCSE with ⌊√n⌋ batches of ⌊√n⌋ draws.
pub fn mcse_batch_means(x: &[f64]) -> f64 {
    let n = x.len();
    let b = (n as f64).sqrt().floor() as usize;
    if b < 2 {
        return f64::NAN;
    }
    let a = n / b;
    let bm: Vec<f64> = (0..a).map(|i| mean(&x[i * b..(i + 1) * b])).collect();
    if bm.len() < 2 {
        return f64::NAN;
    }
    (b as f64 * variance(&bm) / n as f64).sqrt()
}

/// One line of the posterior summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub mean: f64,
    pub mcse: f64,
    pub sd: f64,
    pub quantiles: [f64; 5],
    pub rhat: f64,
}

/// Summarises one component given its retained draws per chain.
pub fn summarize_component(name: &str, chains: &[Vec<f64>]) -> Result<SummaryRow> {
    let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    if pooled.is_empty() {
        return Err(Error::Precondition(format!("no draws for {name}")));
    }
    // MCSE of the pooled mean from per-chain batch-means variances.
    let m = chains.len() as f64;
    let per_chain: Vec<f64> = chains.iter().map(|c| mcse_batch_means(c)).collect();
    let mcse = (per_chain.iter().map(|s| s * s).sum::<f64>()).sqrt() / m;
    let q = quantiles(&pooled, &SUMMARY_LEVELS);
    Ok(SummaryRow {
        name: name.to_string(),
        mean: mean(&pooled),
        mcse,
        sd: variance(&pooled).sqrt(),
        quantiles: [q[0], q[1], q[2], q[3], q[4]],
        rhat: split_rhat(chains),
    })
}

pub fn write_summary_csv<W: std::io::Write>(rows: &[SummaryRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["parameter", "mean", "mcse", "sd", "q2.5", "q25", "q50", "q75", "q97.5", "rhat"])?;
    for r in rows {
        let mut rec = vec![r.name.clone()];
        for v in [r.mean, r.mcse, r.sd]
            .into_iter()
            .chain(r.quantiles)
            .chain([r.rhat])
        {
            rec.push(format!("{v:.6}"));
        }
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn rhat_of_iid_chains_is_one() {
        let mut rng = seeded(5);
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..2000).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        assert!((split_rhat(&chains) - 1.0).abs() < 0.01);
    }

    #[test]
    fn rhat_detects_shifted_chain() {
        let mut rng = seeded(5);
        let mut chains: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..500).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        chains[0].iter_mut().for_each(|x| *x += 3.0);
        assert!(split_rhat(&chains) > 1.1);
    }

    #[test]
    fn quantiles_match_sorted_oracle() {
        let x = [3.0, 1.0, 4.0, 1.5, 9.0, 2.6, 5.3];
        let mut s = x.to_vec();
        s.sort_by(f64::total_cmp);
        assert_eq!(quantiles(&x, &[0.5])[0], 3.0);
        assert_eq!(quantiles(&x, &[0.0, 1.0]), vec![1.0, 9.0]);
        // position 6 * 0.25 = 1.5 → halfway between s[1] and s[2]
        assert!((quantiles(&x, &[0.25])[0] - 0.5 * (s[1] + s[2])).abs() < 1e-12);
    }

    #[test]
    fn mcse_of_iid_is_sd_over_root_n() {
        let mut rng = seeded(7);
        let x: Vec<f64> = (0..40_000).map(|_| rng.sample(StandardNormal)).collect();
        let m = mcse_batch_means(&x);
        let target = 1.0 / 200.0;
        assert!((m - target).abs() < 0.2 * target, "{m}");
    }
}
