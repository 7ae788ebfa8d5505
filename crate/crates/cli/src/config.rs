//! Run configuration file. Every field has a default; command-line flags
//! override the file.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use epismc_core::forecast::Aggregation;
use epismc_core::{FixedConfig, GradientMode, ModelKind, PriorSpec, ThetaParams};

/// Environment variable naming a default config file.
pub const CONFIG_ENV: &str = "EPISMC_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Dataset JSON (see the data format section of the README).
    pub data: Option<PathBuf>,
    pub model: ModelSection,
    pub simulate: SimulateSection,
    pub batch: BatchSection,
    pub seq: SeqSection,
    pub forecast: ForecastSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub k: usize,
    pub n_pop: f64,
    pub kind: ModelKind,
    /// Replaces the defaults derived from `k` and `n_pop` entirely.
    pub fixed: Option<FixedConfig>,
    pub prior: Option<PriorSpec>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            k: 4,
            n_pop: 1.0e6,
            kind: ModelKind::CasesAndDeaths,
            fixed: None,
            prior: None,
        }
    }
}

impl ModelSection {
    pub fn fixed_config(&self, window: usize) -> FixedConfig {
        self.fixed.clone().unwrap_or_else(|| {
            let mut c = FixedConfig::new(self.k, self.n_pop);
            c.window = window;
            c
        })
    }

    pub fn prior(&self, k: usize) -> PriorSpec {
        self.prior.clone().unwrap_or_else(|| PriorSpec::default_for(k))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub t: usize,
    /// Generating parameters; the built-in four-regime set when absent.
    pub theta: Option<ThetaParams>,
    /// Calendar date of day 0.
    pub origin: String,
    pub ifr: f64,
    pub window: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            t: 200,
            theta: None,
            origin: "2020-03-01".into(),
            ifr: 0.005,
            window: 28,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSection {
    pub chains: usize,
    pub iters: usize,
    pub burnin: usize,
    pub particles: usize,
    pub gradient: GradientMode,
    /// Every n-th retained draw is filtered for DIC/WAIC; 0 disables.
    pub criteria_thin: usize,
}

impl Default for BatchSection {
    fn default() -> Self {
        Self {
            chains: 4,
            iters: 1200,
            burnin: 700,
            particles: 128,
            gradient: GradientMode::Sensitivity,
            criteria_thin: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeqSection {
    pub n: usize,
    pub m: usize,
    /// Training horizon; by default the first day with cumulative deaths
    /// reaching `t0_min_deaths`.
    pub t0: Option<usize>,
    pub t0_min_deaths: u64,
    pub resample_threshold: f64,
    pub sweeps: usize,
    pub tune_iters: usize,
    /// Write a checkpoint every this many steps.
    pub checkpoint_every: Option<usize>,
}

impl Default for SeqSection {
    fn default() -> Self {
        Self {
            n: 64,
            m: 128,
            t0: None,
            t0_min_deaths: 10,
            resample_threshold: 0.5,
            sweeps: 1,
            tune_iters: 30,
            checkpoint_every: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastSection {
    pub horizon: usize,
    pub aggregation: Aggregation,
    pub draws: usize,
}

impl Default for ForecastSection {
    fn default() -> Self {
        Self {
            horizon: 14,
            aggregation: Aggregation::Daily,
            draws: 1000,
        }
    }
}

/// Loads `path`, or the file named by [`CONFIG_ENV`], or the defaults.
/// A relative `data` path is resolved against the config file's directory.
pub fn load(path: Option<&Path>) -> Result<Config> {
    let env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
    let Some(p) = path.map(Path::to_path_buf).or(env) else {
        return Ok(Config::default());
    };
    let text = std::fs::read_to_string(&p).with_context(|| format!("reading config {}", p.display()))?;
    let mut cfg: Config = serde_json::from_str(&text).map_err(|e| {
        anyhow::Error::new(epismc_core::Error::Validation(format!("{}: {e}", p.display())))
    })?;
    if let Some(d) = &cfg.data {
        if d.is_relative() {
            cfg.data = Some(p.parent().unwrap_or(Path::new(".")).join(d));
        }
    }
    Ok(cfg)
}
