//! Model comparison: DIC, WAIC, predictive likelihood series and the
//! cumulative log predictive Bayes factor.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::variance;
use crate::dist::log_sum_exp;
use crate::error::{Error, Result};
use crate::filters::{pf_run, FilterConfig};
use crate::inference_batch::ChainOutput;
use crate::model::{ParametricModel, SeirFamily};
use crate::observation::Observation;
use crate::params::ThetaParams;
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dic {
    pub dic: f64,
    pub p_dic: f64,
    pub loglik_at_mean: f64,
}

/// `DIC = −2 log p(e | θ̂) + 2 p_DIC`, with p_DIC half the sample variance
/// of the per-draw log-likelihoods.
pub fn dic(loglik_samples: &[f64], loglik_at_mean: f64) -> Result<Dic> {
    if loglik_samples.len() < 2 {
        return Err(Error::Precondition("DIC needs at least two draws".into()));
    }
    let p_dic = variance(loglik_samples) / 2.0;
    Ok(Dic {
        dic: -2.0 * loglik_at_mean + 2.0 * p_dic,
        p_dic,
        loglik_at_mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waic {
    pub waic: f64,
    pub lppd: f64,
    pub p_waic: f64,
}

/// WAIC from a `T × N` matrix of pointwise log-likelihoods.
///
/// A row containing some −∞ entries has infinite variance and so an
/// infinite penalty; a row of only −∞ is an error.
pub fn waic(pointwise: &[Vec<f64>]) -> Result<Waic> {
    let mut lppd = 0.0;
    let mut p_waic = 0.0;
    for (t, row) in pointwise.iter().enumerate() {
        if row.is_empty() {
            return Err(Error::Precondition(format!("no draws at t = {t}")));
        }
        let lse = log_sum_exp(row);
        if lse == f64::NEG_INFINITY {
            return Err(Error::Validation(format!("every draw has zero likelihood at t = {t}")));
        }
        lppd += lse - (row.len() as f64).ln();
        p_waic += if row.iter().any(|v| v.is_infinite()) {
            f64::INFINITY
        } else {
            variance(row)
        };
    }
    Ok(Waic {
        waic: -2.0 * lppd + 2.0 * p_waic,
        lppd,
        p_waic,
    })
}

/// Per-day log predictive likelihoods starting at model day `start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlSeries {
    pub label: String,
    pub start: usize,
    #[serde(with = "crate::serde_util::vec_f64")]
    pub values: Vec<f64>,
}

impl PlSeries {
    pub fn end(&self) -> usize {
        self.start + self.values.len()
    }

    fn window(&self, t: usize, u: usize) -> Result<&[f64]> {
        if t < self.start || t + u > self.end() {
            return Err(Error::Alignment(format!(
                "series `{}` covers days [{}, {}), window is [{t}, {})",
                self.label,
                self.start,
                self.end(),
                t + u
            )));
        }
        Ok(&self.values[t - self.start..t - self.start + u])
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Joint log predictive of each complete 7-day block, by the chain rule.
    pub fn weekly(&self) -> PlSeries {
        PlSeries {
            label: self.label.clone(),
            start: 0,
            values: self.values.chunks_exact(7).map(|c| c.iter().sum()).collect(),
        }
    }
}

/// Σ over days `t..t+u` of `log PL(A) − log PL(B)`; positive favours A.
pub fn clpbf(a: &PlSeries, b: &PlSeries, t: usize, u: usize) -> Result<f64> {
    let wa = a.window(t, u)?;
    let wb = b.window(t, u)?;
    Ok(wa.iter().zip(wb).map(|(x, y)| x - y).sum())
}

/// Running CLPBF over the common range of two series.
pub fn clpbf_series(a: &PlSeries, b: &PlSeries) -> Result<Vec<f64>> {
    if a.start != b.start || a.values.len() != b.values.len() {
        return Err(Error::Alignment(format!(
            "`{}` covers [{}, {}) but `{}` covers [{}, {})",
            a.label,
            a.start,
            a.end(),
            b.label,
            b.start,
            b.end()
        )));
    }
    let mut acc = 0.0;
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| {
            acc += x - y;
            acc
        })
        .collect())
}

/// Per-model inputs to the comparison table. Either part may be absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionReport {
    pub label: String,
    pub dic: Option<Dic>,
    pub waic: Option<Waic>,
    pub pl: Option<PlSeries>,
}

impl CriterionReport {
    pub fn cum_log_pl_daily(&self) -> Option<f64> {
        self.pl.as_ref().map(PlSeries::total)
    }

    pub fn cum_log_pl_weekly(&self) -> Option<f64> {
        self.pl.as_ref().map(|p| p.weekly().total())
    }
}

/// Posterior mean of the unconstrained parameters, mapped back.
pub fn posterior_mean_theta(chains: &[ChainOutput]) -> Result<ThetaParams> {
    let mut sum: Option<Vec<f64>> = None;
    let mut n = 0usize;
    let mut layout = None;
    for c in chains {
        for i in c.retained() {
            let v = c.theta[i].to_unconstrained()?;
            layout = Some(c.theta[i].layout());
            match &mut sum {
                None => sum = Some(v),
                Some(s) => s.iter_mut().zip(&v).for_each(|(a, b)| *a += b),
            }
            n += 1;
        }
    }
    let (sum, layout) = match (sum, layout) {
        (Some(s), Some(l)) => (s, l),
        _ => return Err(Error::Precondition("no retained draws".into())),
    };
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    ThetaParams::from_unconstrained(&mean, layout)
}

/// Particle-filter log-likelihoods at every `thin`-th retained draw (total
/// and per day), plus the estimate at the posterior mean; yields DIC and WAIC.
pub fn batch_criteria(
    family: &SeirFamily,
    data: &[Observation],
    chains: &[ChainOutput],
    thin: usize,
    filter: &FilterConfig,
    seed: u64,
) -> Result<(Dic, Waic)> {
    let thin = thin.max(1);
    let draws: Vec<&ThetaParams> = chains
        .iter()
        .flat_map(|c| c.retained().step_by(thin).map(move |i| &c.theta[i]))
        .collect();
    let runs: Vec<(f64, Vec<f64>)> = draws
        .par_iter()
        .enumerate()
        .map(|(j, th)| {
            let mut r = substream(seed, j as u64);
            let (cloud, ll) = pf_run(&family.model(th), data, filter, &mut r)?;
            Ok((ll, cloud.log_increments))
        })
        .collect::<Result<_>>()?;
    let theta_hat = posterior_mean_theta(chains)?;
    let mut r = substream(seed, u64::MAX);
    let (_, ll_hat) = pf_run(&family.model(&theta_hat), data, filter, &mut r)?;
    let totals: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let t_len = data.len();
    let pointwise: Vec<Vec<f64>> = (0..t_len).map(|t| runs.iter().map(|r| r.1[t]).collect()).collect();
    Ok((dic(&totals, ll_hat)?, waic(&pointwise)?))
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// The four-panel comparison table: DIC, WAIC, daily and weekly cumulative
/// log predictive likelihood. CLPBF columns are relative to the first model
/// that has a predictive series.
pub fn write_comparison_csv<W: std::io::Write>(reports: &[CriterionReport], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["panel", "model", "value", "fit", "penalty", "clpbf"])?;
    for r in reports {
        let d = r.dic.as_ref();
        wr.write_record([
            "dic".into(),
            r.label.clone(),
            fmt(d.map(|d| d.dic)),
            fmt(d.map(|d| d.loglik_at_mean)),
            fmt(d.map(|d| d.p_dic)),
            String::new(),
        ])?;
    }
    for r in reports {
        let x = r.waic.as_ref();
        wr.write_record([
            "waic".into(),
            r.label.clone(),
            fmt(x.map(|x| x.waic)),
            fmt(x.map(|x| x.lppd)),
            fmt(x.map(|x| x.p_waic)),
            String::new(),
        ])?;
    }
    let reference = reports.iter().find_map(|r| r.pl.as_ref());
    for (panel, weekly) in [("log_pl_daily", false), ("log_pl_weekly", true)] {
        for r in reports {
            let series = r.pl.as_ref().map(|p| if weekly { p.weekly() } else { p.clone() });
            let rel = match (&series, reference) {
                (Some(s), Some(base)) => {
                    let b = if weekly { base.weekly() } else { base.clone() };
                    Some(clpbf(s, &b, s.start, s.values.len())?)
                }
                _ => None,
            };
            wr.write_record([
                panel.into(),
                r.label.clone(),
                fmt(series.as_ref().map(PlSeries::total)),
                String::new(),
                String::new(),
                fmt(rel),
            ])?;
        }
    }
    wr.flush()?;
    Ok(())
}
