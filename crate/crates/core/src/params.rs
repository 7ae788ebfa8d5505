//! Static model parameters, fixed constants, priors, and the bijection
//! between the constrained parameter space and ℝⁿ used by the HMC kernel.
//!
//! Unconstrained layout (in order):
//!
//! | block        | length | transform                                  |
//! |--------------|--------|--------------------------------------------|
//! | `log_beta`   | K      | first value, then log of successive gaps   |
//! | `gamma1`     | 1      | log                                        |
//! | `gamma2`     | 1      | log                                        |
//! | `epsilon`    | 1      | log                                        |
//! | `p`          | K−1    | logit                                      |
//! | `p_init`     | m−1    | stick-breaking (m initial destinations)    |
//! | `r`          | K+1    | log                                        |
//! | `psi`        | K+1    | logit                                      |
//! | `phi_cases`  | 1      | log                                        |
//! | `phi_deaths` | 1      | log                                        |

use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};

/// Block sizes of the parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    /// Number of recurring regimes.
    pub k: usize,
    /// Number of regimes reachable from the non-recurring initial regime.
    pub n_init: usize,
}

impl ParamLayout {
    pub fn new(k: usize, n_init: usize) -> Self {
        Self { k, n_init }
    }

    pub fn dim(&self) -> usize {
        4 * self.k + self.n_init + 5
    }

    pub fn log_beta(&self) -> std::ops::Range<usize> {
        0..self.k
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
    pub fn p(&self) -> std::ops::Range<usize> {
        let s = self.k + 3;
        s..s + self.k - 1
    }
    pub fn p_init(&self) -> std::ops::Range<usize> {
        let s = self.p().end;
        s..s + self.n_init - 1
    }
    pub fn r(&self) -> std::ops::Range<usize> {
        let s = self.p_init().end;
        s..s + self.k + 1
    }
    pub fn psi(&self) -> std::ops::Range<usize> {
        let s = self.r().end;
        s..s + self.k + 1
    }
    pub fn phi_cases(&self) -> usize {
        self.psi().end
    }
    pub fn phi_deaths(&self) -> usize {
        self.psi().end + 1
    }

    /// Display names, one per unconstrained coordinate. The simplex block
    /// reports its first m−1 components.
    pub fn names(&self) -> Vec<String> {
        let mut n = Vec::with_capacity(self.dim());
        n.extend((1..=self.k).map(|i| format!("log_beta_{i}")));
        n.extend(["gamma1", "gamma2", "epsilon"].map(String::from));
        n.extend((1..self.k).map(|i| format!("p_{i}")));
        n.extend((1..self.n_init).map(|i| format!("p_init_{i}")));
        n.extend((1..=self.k + 1).map(|i| format!("r_{i}")));
        n.extend((1..=self.k + 1).map(|i| format!("psi_{i}")));
        n.extend(["phi_cases", "phi_deaths"].map(String::from));
        n
    }
}

/// All static model parameters in constrained space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaParams {
    /// Per-regime log transmission rates, strictly increasing.
    pub log_beta: Vec<f64>,
    pub gamma1: f64,
    pub gamma2: f64,
    pub epsilon: f64,
    /// Up-move probabilities of recurring regimes 0..K−1.
    pub p: Vec<f64>,
    /// Destination distribution out of the initial regime.
    pub p_init: Vec<f64>,
    /// Duration sizes; index K is the initial regime.
    pub r: Vec<f64>,
    /// Duration success probabilities; index K is the initial regime.
    pub psi: Vec<f64>,
    pub phi_cases: f64,
    pub phi_deaths: f64,
}

/// Gradient with respect to the constrained fields of [`ThetaParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaGrad {
    pub log_beta: Vec<f64>,
    pub gamma1: f64,
    pub gamma2: f64,
    pub epsilon: f64,
    pub p: Vec<f64>,
    pub p_init: Vec<f64>,
    pub r: Vec<f64>,
    pub psi: Vec<f64>,
    pub phi_cases: f64,
    pub phi_deaths: f64,
}

impl ThetaGrad {
    pub fn zeros(layout: ParamLayout) -> Self {
        Self {
            log_beta: vec![0.0; layout.k],
            gamma1: 0.0,
            gamma2: 0.0,
            epsilon: 0.0,
            p: vec![0.0; layout.k - 1],
            p_init: vec![0.0; layout.n_init],
            r: vec![0.0; layout.k + 1],
            psi: vec![0.0; layout.k + 1],
            phi_cases: 0.0,
            phi_deaths: 0.0,
        }
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn in_open_unit(x: f64) -> bool {
    x > 0.0 && x < 1.0
}

impl ThetaParams {
    /// Four-regime parameter set used as the default synthetic truth.
    pub fn reference_k4() -> Self {
        Self {
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

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.log_beta.len(), self.p_init.len())
    }

    /// Checks every invariant and names the first offending field.
    pub fn validate(&self) -> Result<()> {
        let k = self.log_beta.len();
        if k < 1 {
            return Err(Error::constraint("log_beta", "needs at least one regime"));
        }
        if self.p.len() + 1 != k {
            return Err(Error::constraint("p", format!("expected {} entries", k - 1)));
        }
        if self.r.len() != k + 1 {
            return Err(Error::constraint("r", format!("expected {} entries", k + 1)));
        }
        if self.psi.len() != k + 1 {
            return Err(Error::constraint("psi", format!("expected {} entries", k + 1)));
        }
        if self.p_init.len() < 2 {
            return Err(Error::constraint("p_init", "needs at least two destinations"));
        }
        if self.log_beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::constraint("log_beta", "non-finite entry"));
        }
        if self.log_beta.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::constraint("log_beta", "must be strictly increasing"));
        }
        for (name, v) in [
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("epsilon", self.epsilon),
            ("phi_cases", self.phi_cases),
            ("phi_deaths", self.phi_deaths),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::constraint(name, format!("must be positive, got {v}")));
            }
        }
        if let Some(i) = self.r.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::constraint(format!("r[{i}]"), "must be positive"));
        }
        if let Some(i) = self.p.iter().position(|&v| !in_open_unit(v)) {
            return Err(Error::constraint(format!("p[{i}]"), "must lie in (0, 1)"));
        }
        if let Some(i) = self.psi.iter().position(|&v| !in_open_unit(v)) {
            return Err(Error::constraint(format!("psi[{i}]"), "must lie in (0, 1)"));
        }
        if let Some(i) = self.p_init.iter().position(|&v| !in_open_unit(v)) {
            return Err(Error::constraint(format!("p_init[{i}]"), "must lie in (0, 1)"));
        }
        let s: f64 = self.p_init.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::constraint("p_init", format!("must sum to 1, sums to {s}")));
        }
        Ok(())
    }

    /// Maps to the unconstrained real vector.
    pub fn to_unconstrained(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let layout = self.layout();
        let mut v = Vec::with_capacity(layout.dim());
        v.push(self.log_beta[0]);
        v.extend(self.log_beta.windows(2).map(|w| (w[1] - w[0]).ln()));
        v.extend([self.gamma1.ln(), self.gamma2.ln(), self.epsilon.ln()]);
        v.extend(self.p.iter().map(|&x| logit(x)));
        let m = self.p_init.len();
        let mut rem = 1.0;
        for (j, &x) in self.p_init[..m - 1].iter().enumerate() {
            let z = x / rem;
            v.push(logit(z) + ((m - 1 - j) as f64).ln());
            rem -= x;
        }
        v.extend(self.r.iter().map(|x| x.ln()));
        v.extend(self.psi.iter().map(|&x| logit(x)));
        v.extend([self.phi_cases.ln(), self.phi_deaths.ln()]);
        debug_assert_eq!(v.len(), layout.dim());
        Ok(v)
    }

    /// Inverse of [`ThetaParams::to_unconstrained`].
    pub fn from_unconstrained(v: &[f64], layout: ParamLayout) -> Result<Self> {
        if v.len() != layout.dim() {
            return Err(Error::Shape {
                what: "unconstrained parameter vector".into(),
                expected: layout.dim(),
                got: v.len(),
            });
        }
        let mut log_beta = Vec::with_capacity(layout.k);
        let lb = &v[layout.log_beta()];
        log_beta.push(lb[0]);
        for &gap in &lb[1..] {
            let prev = *log_beta.last().unwrap();
            log_beta.push(prev + gap.exp());
        }
        let m = layout.n_init;
        let mut p_init = Vec::with_capacity(m);
        let mut rem = 1.0;
        for (j, &y) in v[layout.p_init()].iter().enumerate() {
            let z = logistic(y - ((m - 1 - j) as f64).ln());
            let x = rem * z;
            p_init.push(x);
            rem -= x;
        }
        p_init.push(rem);
        Ok(Self {
            log_beta,
            gamma1: v[layout.gamma1()].exp(),
            gamma2: v[layout.gamma2()].exp(),
            epsilon: v[layout.epsilon()].exp(),
            p: v[layout.p()].iter().map(|&y| logistic(y)).collect(),
            p_init,
            r: v[layout.r()].iter().map(|y| y.exp()).collect(),
            psi: v[layout.psi()].iter().map(|&y| logistic(y)).collect(),
            phi_cases: v[layout.phi_cases()].exp(),
            phi_deaths: v[layout.phi_deaths()].exp(),
        })
    }

    /// Values in the same order as [`ParamLayout::names`].
    pub fn reported_values(&self) -> Vec<f64> {
        let m = self.p_init.len();
        let mut out = self.log_beta.clone();
        out.extend([self.gamma1, self.gamma2, self.epsilon]);
        out.extend(&self.p);
        out.extend(&self.p_init[..m - 1]);
        out.extend(&self.r);
        out.extend(&self.psi);
        out.extend([self.phi_cases, self.phi_deaths]);
        out
    }
}

/// Log absolute Jacobian determinant of `from_unconstrained` at `v`, and its gradient.
pub fn log_jacobian(v: &[f64], layout: ParamLayout) -> (f64, Vec<f64>) {
    let mut lj = 0.0;
    let mut g = vec![0.0; v.len()];
    for i in layout.log_beta().skip(1) {
        lj += v[i];
        g[i] = 1.0;
    }
    for i in [layout.gamma1(), layout.gamma2(), layout.epsilon()]
        .into_iter()
        .chain(layout.r())
        .chain([layout.phi_cases(), layout.phi_deaths()])
    {
        lj += v[i];
        g[i] = 1.0;
    }
    for i in layout.p().chain(layout.psi()) {
        let x = logistic(v[i]);
        lj += x.ln() + (1.0 - x).ln();
        g[i] = 1.0 - 2.0 * x;
    }
    let m = layout.n_init;
    let mut ln_rem = 0.0;
    for (j, i) in layout.p_init().enumerate() {
        let z = logistic(v[i] - ((m - 1 - j) as f64).ln());
        lj += z.ln() + (1.0 - z).ln() + ln_rem;
        let later = (m - 2 - j) as f64;
        g[i] = 1.0 - 2.0 * z - z * later;
        ln_rem += (1.0 - z).ln();
    }
    (lj, g)
}

/// Chain rule: turns a gradient in constrained coordinates into one in
/// unconstrained coordinates at `v` (whose image is `theta`).
pub fn pullback(v: &[f64], theta: &ThetaParams, g: &ThetaGrad) -> Vec<f64> {
    let layout = theta.layout();
    let mut out = vec![0.0; v.len()];
    let lb = layout.log_beta();
    let mut tail = 0.0;
    for j in (0..layout.k).rev() {
        tail += g.log_beta[j];
        out[lb.start + j] = if j == 0 { tail } else { tail * v[lb.start + j].exp() };
    }
    out[layout.gamma1()] = g.gamma1 * theta.gamma1;
    out[layout.gamma2()] = g.gamma2 * theta.gamma2;
    out[layout.epsilon()] = g.epsilon * theta.epsilon;
    for (j, i) in layout.p().enumerate() {
        let x = theta.p[j];
        out[i] = g.p[j] * x * (1.0 - x);
    }
    let m = layout.n_init;
    let x = &theta.p_init;
    for (k, i) in layout.p_init().enumerate() {
        let z = logistic(v[i] - ((m - 1 - k) as f64).ln());
        let later: f64 = (k + 1..m).map(|j| x[j] * g.p_init[j]).sum();
        out[i] = x[k] * (1.0 - z) * g.p_init[k] - z * later;
    }
    for (j, i) in layout.r().enumerate() {
        out[i] = g.r[j] * theta.r[j];
    }
    for (j, i) in layout.psi().enumerate() {
        let x = theta.psi[j];
        out[i] = g.psi[j] * x * (1.0 - x);
    }
    out[layout.phi_cases()] = g.phi_cases * theta.phi_cases;
    out[layout.phi_deaths()] = g.phi_deaths * theta.phi_deaths;
    out
}

/// Which regimes the initial regime may move into, and which β it uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedConfig {
    /// Vaccine efficacy.
    pub rho: f64,
    /// Days between first vaccination and immunity.
    pub vaccine_delay: usize,
    /// Death-convolution memory in days.
    pub window: usize,
    pub n_pop: f64,
    /// Number of recurring regimes.
    pub k: usize,
    pub dt_substeps: usize,
    /// Exposed individuals (stage 1) at day 0.
    pub initial_exposed: f64,
    /// Recurring regimes reachable from the initial regime.
    pub init_destinations: Vec<usize>,
    /// Index into `log_beta` whose rate the initial regime shares.
    pub init_beta_index: usize,
}

impl FixedConfig {
    pub fn new(k: usize, n_pop: f64) -> Self {
        Self {
            rho: 0.5,
            vaccine_delay: 45,
            window: 28,
            n_pop,
            k,
            dt_substeps: 24,
            initial_exposed: (n_pop * 1e-4).max(1.0),
            init_destinations: (0..k.min(3)).collect(),
            init_beta_index: 2.min(k - 1),
        }
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.k, self.init_destinations.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::constraint("k", "at least two recurring regimes"));
        }
        if self.window < 1 {
            return Err(Error::constraint("window", "must be at least 1"));
        }
        if self.dt_substeps < 1 {
            return Err(Error::constraint("dt_substeps", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::constraint("rho", "must lie in [0, 1]"));
        }
        if !(self.n_pop >= 1.0 && self.n_pop.fract() == 0.0) {
            return Err(Error::constraint("n_pop", "must be a positive integer"));
        }
        if !(self.initial_exposed >= 0.0 && self.initial_exposed <= self.n_pop) {
            return Err(Error::constraint("initial_exposed", "must lie in [0, n_pop]"));
        }
        if self.init_destinations.len() < 2 {
            return Err(Error::constraint("init_destinations", "needs at least two regimes"));
        }
        let mut seen = vec![false; self.k];
        for &d in &self.init_destinations {
            if d >= self.k || seen[d] {
                return Err(Error::constraint(
                    "init_destinations",
                    "entries must be distinct recurring regimes",
                ));
            }
            seen[d] = true;
        }
        if self.init_beta_index >= self.k {
            return Err(Error::constraint("init_beta_index", "out of range"));
        }
        Ok(())
    }
}

/// Gamma prior in (shape, scale) form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub scale: f64,
}

impl GammaPrior {
    pub const fn new(shape: f64, scale: f64) -> Self {
        Self { shape, scale }
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if !(x > 0.0) {
            return f64::NEG_INFINITY;
        }
        (self.shape - 1.0) * x.ln() - x / self.scale - ln_gamma(self.shape) - self.shape * self.scale.ln()
    }

    pub fn d_ln_pdf(&self, x: f64) -> f64 {
        (self.shape - 1.0) / x - 1.0 / self.scale
    }

    pub fn mean(&self) -> f64 {
        self.shape * self.scale
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        Gamma::new(self.shape, self.scale).unwrap().sample(rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaPrior {
    pub a: f64,
    pub b: f64,
}

impl BetaPrior {
    pub fn ln_pdf(&self, x: f64) -> f64 {
        if !in_open_unit(x) {
            return f64::NEG_INFINITY;
        }
        (self.a - 1.0) * x.ln() + (self.b - 1.0) * (1.0 - x).ln() + ln_gamma(self.a + self.b)
            - ln_gamma(self.a)
            - ln_gamma(self.b)
    }

    pub fn d_ln_pdf(&self, x: f64) -> f64 {
        (self.a - 1.0) / x - (self.b - 1.0) / (1.0 - x)
    }

    pub fn mean(&self) -> f64 {
        self.a / (self.a + self.b)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // Beta(0.5, 0.5) draws can round to exactly 0 or 1.
        let d = Beta::new(self.a, self.b).unwrap();
        loop {
            let x: f64 = d.sample(rng);
            if in_open_unit(x) {
                return x;
            }
        }
    }
}

fn dirichlet_ln_pdf(x: &[f64], alpha: f64) -> f64 {
    let n = x.len() as f64;
    ln_gamma(n * alpha) - n * ln_gamma(alpha) + (alpha - 1.0) * x.iter().map(|v| v.ln()).sum::<f64>()
}

/// Prior families and hyperparameters for every block of [`ThetaParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    /// Mean of the ordered multivariate normal on `log_beta`.
    pub log_beta_mean: Vec<f64>,
    /// Covariance of the ordered multivariate normal, row-major K×K.
    pub log_beta_cov: Vec<Vec<f64>>,
    pub gamma1: GammaPrior,
    pub gamma2: GammaPrior,
    pub epsilon: GammaPrior,
    /// Duration size priors, index K is the initial regime.
    pub r: Vec<GammaPrior>,
    pub psi: BetaPrior,
    pub phi_cases: GammaPrior,
    pub phi_deaths: GammaPrior,
    /// Symmetric Dirichlet concentration applied to every transition simplex.
    pub dirichlet_concentration: f64,
}

impl PriorSpec {
    /// Defaults for the UK application, generalised to any K.
    pub fn default_for(k: usize) -> Self {
        let log_beta_mean = if k == 4 {
            vec![0.15f64.ln(), 0.4f64.ln(), 0.6f64.ln(), 1.2f64.ln()]
        } else {
            let (lo, hi) = (0.15f64.ln(), 1.2f64.ln());
            (0..k)
                .map(|i| lo + (hi - lo) * i as f64 / (k - 1).max(1) as f64)
                .collect()
        };
        let log_beta_cov = (0..k)
            .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let recurring_shapes = [40.0, 30.0, 20.0, 30.0];
        let mut r: Vec<GammaPrior> = (0..k)
            .map(|i| GammaPrior::new(*recurring_shapes.get(i).unwrap_or(&30.0), 1.0))
            .collect();
        r.push(GammaPrior::new(28.0, 1.0));
        Self {
            log_beta_mean,
            log_beta_cov,
            gamma1: GammaPrior::new(1600.0, 1.0 / 4000.0),
            gamma2: GammaPrior::new(2500.0, 1.0 / 5000.0),
            epsilon: GammaPrior::new(1000.0, 1.0 / 10000.0),
            r,
            psi: BetaPrior { a: 0.5, b: 0.5 },
            phi_cases: GammaPrior::new(2500.0, 1.0 / 500.0),
            phi_deaths: GammaPrior::new(2500.0, 1.0 / 500.0),
            dirichlet_concentration: k as f64,
        }
    }

    pub fn k(&self) -> usize {
        self.log_beta_mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if self.log_beta_cov.len() != k || self.log_beta_cov.iter().any(|r| r.len() != k) {
            return Err(Error::constraint("log_beta_cov", format!("must be {k}x{k}")));
        }
        if self.r.len() != k + 1 {
            return Err(Error::constraint("r", format!("needs {} priors", k + 1)));
        }
        if self.cholesky().is_none() {
            return Err(Error::constraint("log_beta_cov", "must be positive definite"));
        }
        if !(self.dirichlet_concentration > 0.0) {
            return Err(Error::constraint("dirichlet_concentration", "must be positive"));
        }
        Ok(())
    }

    fn cholesky(&self) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        let k = self.k();
        let m = nalgebra::DMatrix::from_fn(k, k, |i, j| self.log_beta_cov[i][j]);
        m.cholesky()
    }

    /// Unnormalised log density of the ordered normal (normal kernel plus
    /// Gaussian constant; the truncation constant is dropped) and its gradient.
    fn log_beta_term(&self, lb: &[f64]) -> (f64, Vec<f64>) {
        let k = self.k();
        let chol = self.cholesky().expect("validated covariance");
        let diff = nalgebra::DVector::from_fn(k, |i, _| lb[i] - self.log_beta_mean[i]);
        let prec_diff = chol.solve(&diff);
        let quad = diff.dot(&prec_diff);
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let val = -0.5 * quad - 0.5 * log_det - 0.5 * k as f64 * (2.0 * std::f64::consts::PI).ln();
        (val, prec_diff.iter().map(|x| -x).collect())
    }

    /// Log prior density on the constrained space; −∞ outside the support.
    pub fn log_prior(&self, theta: &ThetaParams) -> f64 {
        if theta.validate().is_err() || theta.log_beta.len() != self.k() {
            return f64::NEG_INFINITY;
        }
        self.log_prior_and_grad(theta).0
    }

    /// Log prior and its gradient in constrained coordinates. Assumes `theta` is valid.
    pub fn log_prior_and_grad(&self, theta: &ThetaParams) -> (f64, ThetaGrad) {
        let mut g = ThetaGrad::zeros(theta.layout());
        let (mut lp, glb) = self.log_beta_term(&theta.log_beta);
        g.log_beta = glb;
        let scalars = [
            (&self.gamma1, theta.gamma1, &mut g.gamma1),
            (&self.gamma2, theta.gamma2, &mut g.gamma2),
            (&self.epsilon, theta.epsilon, &mut g.epsilon),
            (&self.phi_cases, theta.phi_cases, &mut g.phi_cases),
            (&self.phi_deaths, theta.phi_deaths, &mut g.phi_deaths),
        ];
        for (prior, x, slot) in scalars {
            lp += prior.ln_pdf(x);
            *slot = prior.d_ln_pdf(x);
        }
        for (i, &x) in theta.r.iter().enumerate() {
            lp += self.r[i].ln_pdf(x);
            g.r[i] = self.r[i].d_ln_pdf(x);
        }
        for (i, &x) in theta.psi.iter().enumerate() {
            lp += self.psi.ln_pdf(x);
            g.psi[i] = self.psi.d_ln_pdf(x);
        }
        let a = self.dirichlet_concentration;
        let up_down = BetaPrior { a, b: a };
        for (i, &x) in theta.p.iter().enumerate() {
            lp += up_down.ln_pdf(x);
            g.p[i] = up_down.d_ln_pdf(x);
        }
        lp += dirichlet_ln_pdf(&theta.p_init, a);
        for (i, &x) in theta.p_init.iter().enumerate() {
            g.p_init[i] = (a - 1.0) / x;
        }
        (lp, g)
    }

    /// Log density of the pushforward on ℝⁿ (prior plus log-Jacobian) and its gradient.
    pub fn log_prior_unconstrained(&self, v: &[f64], layout: ParamLayout) -> Result<(f64, Vec<f64>)> {
        let theta = ThetaParams::from_unconstrained(v, layout)?;
        if theta.validate().is_err() {
            // Reachable only through floating-point saturation at extreme v.
            return Ok((f64::NEG_INFINITY, vec![0.0; v.len()]));
        }
        let (lp, gc) = self.log_prior_and_grad(&theta);
        let mut grad = pullback(v, &theta, &gc);
        let (lj, gj) = log_jacobian(v, layout);
        for (a, b) in grad.iter_mut().zip(gj) {
            *a += b;
        }
        Ok((lp + lj, grad))
    }

    /// Draws θ from the prior. The ordered normal block uses rejection sampling.
    pub fn sample<R: Rng + ?Sized>(&self, layout: ParamLayout, rng: &mut R) -> ThetaParams {
        let k = self.k();
        let chol = self.cholesky().expect("validated covariance");
        let l = chol.l();
        let log_beta = loop {
            let z = nalgebra::DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &l * z;
            let lb: Vec<f64> = (0..k).map(|i| x[i] + self.log_beta_mean[i]).collect();
            if lb.windows(2).all(|w| w[0] < w[1]) {
                break lb;
            }
        };
        let a = self.dirichlet_concentration;
        let up_down = BetaPrior { a, b: a };
        let g = Gamma::new(a, 1.0).unwrap();
        let p_init = loop {
            let draws: Vec<f64> = (0..layout.n_init).map(|_| g.sample(rng)).collect();
            let s: f64 = draws.iter().sum();
            let x: Vec<f64> = draws.iter().map(|d| d / s).collect();
            if x.iter().all(|&v| in_open_unit(v)) {
                break x;
            }
        };
        ThetaParams {
            log_beta,
            gamma1: self.gamma1.sample(rng),
            gamma2: self.gamma2.sample(rng),
            epsilon: self.epsilon.sample(rng),
            p: (0..k - 1).map(|_| up_down.sample(rng)).collect(),
            p_init,
            r: self.r.iter().map(|pr| pr.sample(rng)).collect(),
            psi: (0..=k).map(|_| self.psi.sample(rng)).collect(),
            phi_cases: self.phi_cases.sample(rng),
            phi_deaths: self.phi_deaths.sample(rng),
        }
    }
}

/// Gradient of log NB(d; size r, success prob psi) with respect to (r, psi).
pub(crate) fn nb_duration_grad(d: f64, r: f64, psi: f64) -> (f64, f64) {
    (digamma(d + r) - digamma(r) + psi.ln(), r / psi - d / (1.0 - psi))
}
