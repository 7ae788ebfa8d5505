//! Multinomial No-U-Turn sampler with dual-averaging step size and windowed
//! mass-matrix adaptation.
//!
//! The tree builder follows the usual recursive doubling scheme: each
//! subtree is sampled multinomially with biased progressive sampling at the
//! top level, and the generalised no-U-turn criterion is checked across
//! every subtree and on the merged boundaries.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dist::log_sum_exp;
use crate::error::{Error, Result};

/// A differentiable log density on ℝⁿ.
pub trait LogDensity {
    fn dim(&self) -> usize;
    /// Log density and gradient. Errors and non-finite values are treated as
    /// points of zero density.
    fn log_density_grad(&self, q: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl<F> LogDensity for (usize, F)
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn dim(&self) -> usize {
        self.0
    }
    fn log_density_grad(&self, q: &[f64]) -> Result<(f64, Vec<f64>)> {
        (self.1)(q)
    }
}

fn evaluate<T: LogDensity + ?Sized>(target: &T, q: &[f64]) -> (f64, Vec<f64>) {
    match target.log_density_grad(q) {
        Ok((lp, g)) if lp.is_finite() && g.iter().all(|x| x.is_finite()) => (lp, g),
        _ => (f64::NEG_INFINITY, vec![0.0; q.len()]),
    }
}

/// Inverse mass matrix: the kinetic energy is `½ pᵀ M⁻¹ p`.
#[derive(Debug, Clone, PartialEq)]
pub enum Metric {
    Diagonal(Vec<f64>),
    Dense {
        inv_mass: DMatrix<f64>,
        /// Lower Cholesky factor of `inv_mass`.
        chol: DMatrix<f64>,
    },
}

impl Metric {
    pub fn unit(n: usize) -> Self {
        Metric::Diagonal(vec![1.0; n])
    }

    /// Dense metric from a covariance estimate; fails if it is not positive definite.
    pub fn dense(inv_mass: DMatrix<f64>) -> Result<Self> {
        let chol = inv_mass
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical {
                day: 0,
                state: "covariance is not positive definite".into(),
            })?
            .l();
        Ok(Metric::Dense { inv_mass, chol })
    }

    pub fn dim(&self) -> usize {
        match self {
            Metric::Diagonal(d) => d.len(),
            Metric::Dense { inv_mass, .. } => inv_mass.nrows(),
        }
    }

    /// `M⁻¹ p`.
    pub fn velocity(&self, p: &[f64]) -> Vec<f64> {
        match self {
            Metric::Diagonal(d) => p.iter().zip(d).map(|(a, b)| a * b).collect(),
            Metric::Dense { inv_mass, .. } => (inv_mass * DVector::from_column_slice(p)).as_slice().to_vec(),
        }
    }

    pub fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * dot(p, &self.velocity(p))
    }

    /// Draws `p ~ N(0, M)`.
    pub fn sample_momentum<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.dim();
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        match self {
            Metric::Diagonal(d) => z.iter().zip(d).map(|(a, b)| a / b.sqrt()).collect(),
            Metric::Dense { chol, .. } => {
                // M = (L Lᵀ)⁻¹, so p = L⁻ᵀ z has covariance M.
                let lt = chol.transpose();
                let p = lt
                    .solve_upper_triangular(&DVector::from_vec(z))
                    .expect("Cholesky factor is non-singular");
                p.as_slice().to_vec()
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

#[derive(Debug, Clone)]
struct Point {
    q: Vec<f64>,
    p: Vec<f64>,
    logp: f64,
    grad: Vec<f64>,
}

/// Outcome of one NUTS transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NutsDraw {
    pub q: Vec<f64>,
    pub logp: f64,
    pub accept_stat: f64,
    pub depth: usize,
    pub n_leapfrog: usize,
    pub divergent: bool,
    /// Energy change at the selected point.
    pub energy_error: f64,
}

#[derive(Debug, Clone)]
pub struct Nuts {
    pub step_size: f64,
    pub metric: Metric,
    pub max_depth: usize,
    pub max_delta_h: f64,
}

struct TreeState<'a, T: LogDensity + ?Sized> {
    target: &'a T,
    metric: &'a Metric,
    step: f64,
    h0: f64,
    max_delta_h: f64,
    n_leapfrog: usize,
    sum_metro: f64,
    divergent: bool,
}

struct Side {
    p: Vec<f64>,
    p_sharp: Vec<f64>,
}

fn criterion(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

impl<T: LogDensity + ?Sized> TreeState<'_, T> {
    fn leapfrog(&mut self, z: &mut Point, sign: f64) {
        let e = sign * self.step;
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * e * g;
        }
        let v = self.metric.velocity(&z.p);
        for (q, vi) in z.q.iter_mut().zip(&v) {
            *q += e * vi;
        }
        let (lp, g) = evaluate(self.target, &z.q);
        z.logp = lp;
        z.grad = g;
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * e * g;
        }
    }

    fn hamiltonian(&self, z: &Point) -> f64 {
        let h = -z.logp + self.metric.kinetic(&z.p);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    /// Builds a subtree of depth `depth` from `z` in direction `sign`.
    /// Returns (valid, proposal, begin side, end side, rho, log weight).
    #[allow(clippy::type_complexity)]
    fn build<R: Rng + ?Sized>(
        &mut self,
        depth: usize,
        z: &mut Point,
        sign: f64,
        rng: &mut R,
    ) -> (bool, Point, Side, Side, Vec<f64>, f64) {
        if depth == 0 {
            self.leapfrog(z, sign);
            self.n_leapfrog += 1;
            let h = self.hamiltonian(z);
            let delta = self.h0 - h;
            if h - self.h0 > self.max_delta_h {
                self.divergent = true;
            }
            self.sum_metro += if delta > 0.0 { 1.0 } else { delta.exp() };
            let ps = self.metric.velocity(&z.p);
            let side = || Side {
                p: z.p.clone(),
                p_sharp: ps.clone(),
            };
            return (!self.divergent, z.clone(), side(), side(), z.p.clone(), delta);
        }
        let (ok, prop_init, beg, init_end, rho_init, lw_init) = self.build(depth - 1, z, sign, rng);
        if !ok {
            return (false, prop_init, beg, init_end, rho_init, lw_init);
        }
        let (ok, prop_final, final_beg, end, rho_final, lw_final) = self.build(depth - 1, z, sign, rng);
        if !ok {
            return (false, prop_final, beg, end, rho_final, lw_final);
        }
        let lw = log_sum_exp(&[lw_init, lw_final]);
        let take_final = lw_final > lw || rng.random::<f64>() < (lw_final - lw).exp();
        let prop = if take_final { prop_final } else { prop_init };
        let rho = add(&rho_init, &rho_final);
        let mut persist = criterion(&beg.p_sharp, &end.p_sharp, &rho);
        persist &= criterion(&beg.p_sharp, &final_beg.p_sharp, &add(&rho_init, &final_beg.p));
        persist &= criterion(&init_end.p_sharp, &end.p_sharp, &add(&rho_final, &init_end.p));
        (persist, prop, beg, end, rho, lw)
    }
}

impl Nuts {
    pub fn new(step_size: f64, metric: Metric) -> Self {
        Self {
            step_size,
            metric,
            max_depth: 10,
            max_delta_h: 1000.0,
        }
    }

    /// One transition from `q`.
    pub fn transition<T: LogDensity + ?Sized, R: Rng + ?Sized>(
        &self,
        q: &[f64],
        target: &T,
        rng: &mut R,
    ) -> Result<NutsDraw> {
        let (logp, grad) = evaluate(target, q);
        if !logp.is_finite() {
            return Err(Error::Precondition("log density is not finite at the current point".into()));
        }
        let p = self.metric.sample_momentum(rng);
        let z0 = Point {
            q: q.to_vec(),
            p,
            logp,
            grad,
        };
        let mut ts = TreeState {
            target,
            metric: &self.metric,
            step: self.step_size,
            h0: 0.0,
            max_delta_h: self.max_delta_h,
            n_leapfrog: 0,
            sum_metro: 0.0,
            divergent: false,
        };
        ts.h0 = ts.hamiltonian(&z0);
        let ps0 = self.metric.velocity(&z0.p);
        let mut fwd = z0.clone();
        let mut bck = z0.clone();
        let mut fwd_side = Side {
            p: z0.p.clone(),
            p_sharp: ps0.clone(),
        };
        let mut bck_side = Side {
            p: z0.p.clone(),
            p_sharp: ps0,
        };
        // Innermost boundaries of the two halves, needed for the extra checks.
        let mut rho = z0.p.clone();
        let mut sample = z0.clone();
        let mut lw = 0.0;
        let mut depth = 0;
        while depth < self.max_depth {
            let forward = rng.random::<f64>() < 0.5;
            let (ok, prop, beg, end, rho_sub, lw_sub) = if forward {
                ts.build(depth, &mut fwd, 1.0, rng)
            } else {
                ts.build(depth, &mut bck, -1.0, rng)
            };
            if !ok {
                break;
            }
            depth += 1;
            if lw_sub > lw || rng.random::<f64>() < (lw_sub - lw).exp() {
                sample = prop;
            }
            lw = log_sum_exp(&[lw, lw_sub]);
            // Orient the old tree and the new subtree as (backward, forward).
            let (rho_bck, rho_fwd, old_side_inner, new_side_inner);
            if forward {
                rho_bck = rho.clone();
                rho_fwd = rho_sub;
                old_side_inner = Side {
                    p: fwd_side.p.clone(),
                    p_sharp: fwd_side.p_sharp.clone(),
                };
                new_side_inner = beg;
                fwd_side = end;
            } else {
                rho_fwd = rho.clone();
                rho_bck = rho_sub;
                old_side_inner = Side {
                    p: bck_side.p.clone(),
                    p_sharp: bck_side.p_sharp.clone(),
                };
                new_side_inner = beg;
                bck_side = end;
            }
            rho = add(&rho_bck, &rho_fwd);
            let mut persist = criterion(&bck_side.p_sharp, &fwd_side.p_sharp, &rho);
            // The inner boundary on the backward half and on the forward half.
            let (bck_inner, fwd_inner) = if forward {
                (&old_side_inner, &new_side_inner)
            } else {
                (&new_side_inner, &old_side_inner)
            };
            persist &= criterion(&bck_side.p_sharp, &fwd_inner.p_sharp, &add(&rho_bck, &fwd_inner.p));
            persist &= criterion(&bck_inner.p_sharp, &fwd_side.p_sharp, &add(&rho_fwd, &bck_inner.p));
            if !persist {
                break;
            }
        }
        let h_sample = ts.hamiltonian(&sample);
        Ok(NutsDraw {
            q: sample.q,
            logp: sample.logp,
            accept_stat: if ts.n_leapfrog > 0 {
                ts.sum_metro / ts.n_leapfrog as f64
            } else {
                0.0
            },
            depth,
            n_leapfrog: ts.n_leapfrog,
            divergent: ts.divergent,
            energy_error: h_sample - ts.h0,
        })
    }

    /// Heuristic initial step size: doubles or halves until the one-step
    /// acceptance probability crosses 0.8.
    pub fn find_reasonable_step<T: LogDensity + ?Sized, R: Rng + ?Sized>(
        &mut self,
        q: &[f64],
        target: &T,
        rng: &mut R,
    ) {
        let (logp, grad) = evaluate(target, q);
        if !logp.is_finite() {
            return;
        }
        let mut direction = 0.0;
        for _ in 0..100 {
            let p = self.metric.sample_momentum(rng);
            let mut z = Point {
                q: q.to_vec(),
                p,
                logp,
                grad: grad.clone(),
            };
            let mut ts = TreeState {
                target,
                metric: &self.metric,
                step: self.step_size,
                h0: 0.0,
                max_delta_h: self.max_delta_h,
                n_leapfrog: 0,
                sum_metro: 0.0,
                divergent: false,
            };
            ts.h0 = ts.hamiltonian(&z);
            ts.leapfrog(&mut z, 1.0);
            let delta = ts.h0 - ts.hamiltonian(&z);
            let d = if delta > 0.8f64.ln() { 1.0 } else { -1.0 };
            if direction == 0.0 {
                direction = d;
            } else if d != direction {
                break;
            }
            let next = if direction > 0.0 {
                self.step_size * 2.0
            } else {
                self.step_size * 0.5
            };
            if !(1e-10..=1e7).contains(&next) {
                break;
            }
            self.step_size = next;
        }
    }
}

/// Nesterov dual averaging of the log step size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualAveraging {
    pub mu: f64,
    pub target: f64,
    pub gamma: f64,
    pub t0: f64,
    pub kappa: f64,
    counter: f64,
    h_bar: f64,
    log_eps_bar: f64,
}

impl DualAveraging {
    pub fn new(step_size: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * step_size).ln(),
            target,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            counter: 0.0,
            h_bar: 0.0,
            log_eps_bar: 0.0,
        }
    }

    pub fn restart(&mut self, step_size: f64) {
        *self = Self::new(step_size, self.target);
    }

    /// Records an acceptance statistic and returns the next step size.
    pub fn update(&mut self, accept_stat: f64) -> f64 {
        let a = if accept_stat.is_finite() { accept_stat.min(1.0) } else { 0.0 };
        self.counter += 1.0;
        let eta = 1.0 / (self.counter + self.t0);
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - a);
        let log_eps = self.mu - self.counter.sqrt() / self.gamma * self.h_bar;
        let x = self.counter.powf(-self.kappa);
        self.log_eps_bar = x * log_eps + (1.0 - x) * self.log_eps_bar;
        log_eps.exp()
    }

    /// The averaged step size used once adaptation ends.
    pub fn final_step(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Running mean and variance (Welford).
#[derive(Debug, Clone, Default)]
pub struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn add(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &xi) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = xi - *m;
            *m += d / n;
            *s += d * (xi - *m);
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn variance(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2.iter().map(|s| s / (n - 1.0).max(1.0)).collect()
    }

    pub fn reset(&mut self) {
        let d = self.mean.len();
        *self = Self::new(d);
    }
}

/// Warmup schedule: a fast initial buffer, doubling slow windows for the
/// metric, and a final fast buffer for the step size alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptSchedule {
    pub warmup: usize,
    pub init_buffer: usize,
    pub term_buffer: usize,
    pub base_window: usize,
}

impl AdaptSchedule {
    pub fn new(warmup: usize) -> Self {
        let (mut init_buffer, mut term_buffer, mut base_window) = (75, 50, 25);
        if warmup < init_buffer + term_buffer + base_window {
            init_buffer = (0.15 * warmup as f64) as usize;
            term_buffer = (0.1 * warmup as f64) as usize;
            base_window = warmup.saturating_sub(init_buffer + term_buffer);
        }
        Self {
            warmup,
            init_buffer,
            term_buffer,
            base_window,
        }
    }

    /// Iterations (0-based) at which a slow window closes.
    pub fn window_ends(&self) -> Vec<usize> {
        let mut ends = vec![];
        if self.base_window == 0 {
            return ends;
        }
        let last = self.warmup - self.term_buffer;
        let mut start = self.init_buffer;
        let mut size = self.base_window;
        while start < last {
            let mut end = start + size;
            if end + 2 * size > last {
                end = last;
            }
            ends.push(end - 1);
            start = end;
            size *= 2;
        }
        ends
    }

    fn in_slow_window(&self, it: usize) -> bool {
        it >= self.init_buffer && it < self.warmup - self.term_buffer && self.base_window > 0
    }
}

/// NUTS with warmup adaptation of step size and diagonal metric.
#[derive(Debug, Clone)]
pub struct AdaptiveNuts {
    pub sampler: Nuts,
    pub adapt_metric: bool,
    pub adapt_step: bool,
    schedule: AdaptSchedule,
    da: DualAveraging,
    var: Welford,
    window_ends: Vec<usize>,
    iteration: usize,
    needs_init: bool,
}

impl AdaptiveNuts {
    pub fn new(dim: usize, warmup: usize) -> Self {
        let schedule = AdaptSchedule::new(warmup);
        let window_ends = schedule.window_ends();
        Self {
            sampler: Nuts::new(0.1, Metric::unit(dim)),
            adapt_metric: true,
            adapt_step: true,
            schedule,
            da: DualAveraging::new(0.1, 0.8),
            var: Welford::new(dim),
            window_ends,
            iteration: 0,
            needs_init: true,
        }
    }

    /// A sampler with fixed settings and no adaptation.
    pub fn fixed(sampler: Nuts) -> Self {
        let dim = sampler.metric.dim();
        Self {
            sampler,
            adapt_metric: false,
            adapt_step: false,
            schedule: AdaptSchedule::new(0),
            da: DualAveraging::new(0.1, 0.8),
            var: Welford::new(dim),
            window_ends: vec![],
            iteration: 0,
            needs_init: false,
        }
    }

    pub fn adapting(&self) -> bool {
        self.iteration < self.schedule.warmup && (self.adapt_step || self.adapt_metric)
    }

    /// One transition, updating the adaptation state while in warmup.
    pub fn step<T: LogDensity + ?Sized, R: Rng + ?Sized>(
        &mut self,
        q: &[f64],
        target: &T,
        rng: &mut R,
    ) -> Result<NutsDraw> {
        if self.needs_init && self.adapt_step {
            self.sampler.find_reasonable_step(q, target, rng);
            self.da.restart(self.sampler.step_size);
            self.needs_init = false;
        }
        let draw = self.sampler.transition(q, target, rng)?;
        if !self.adapting() {
            self.iteration += 1;
            return Ok(draw);
        }
        let it = self.iteration;
        if self.adapt_step {
            self.sampler.step_size = self.da.update(draw.accept_stat);
        }
        if self.adapt_metric && self.schedule.in_slow_window(it) {
            self.var.add(&draw.q);
            if self.window_ends.contains(&it) {
                let n = self.var.count() as f64;
                let v: Vec<f64> = self
                    .var
                    .variance()
                    .iter()
                    .map(|s| (n / (n + 5.0)) * s + 1e-3 * (5.0 / (n + 5.0)))
                    .collect();
                self.sampler.metric = Metric::Diagonal(v);
                self.var.reset();
                if self.adapt_step {
                    self.sampler.find_reasonable_step(&draw.q, target, rng);
                    self.da.restart(self.sampler.step_size);
                }
            }
        }
        self.iteration += 1;
        if self.iteration == self.schedule.warmup && self.adapt_step {
            self.sampler.step_size = self.da.final_step();
        }
        Ok(draw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn std_normal(n: usize) -> (usize, impl Fn(&[f64]) -> Result<(f64, Vec<f64>)>) {
        (n, move |q: &[f64]| {
            Ok((-0.5 * dot(q, q), q.iter().map(|x| -x).collect()))
        })
    }

    #[test]
    fn gaussian_moments() {
        let target = std_normal(10);
        let mut rng = seeded(3);
        let mut nuts = AdaptiveNuts::new(10, 500);
        let mut q = vec![0.5; 10];
        for _ in 0..500 {
            q = nuts.step(&q, &target, &mut rng).unwrap().q;
        }
        let n = 5000;
        let mut mean = vec![0.0; 10];
        let mut cov = vec![vec![0.0; 10]; 10];
        let mut draws = Vec::with_capacity(n);
        for _ in 0..n {
            q = nuts.step(&q, &target, &mut rng).unwrap().q;
            draws.push(q.clone());
        }
        for d in &draws {
            for i in 0..10 {
                mean[i] += d[i] / n as f64;
            }
        }
        for d in &draws {
            for i in 0..10 {
                for j in 0..10 {
                    cov[i][j] += (d[i] - mean[i]) * (d[j] - mean[j]) / (n - 1) as f64;
                }
            }
        }
        for m in &mean {
            assert!(m.abs() < 3.0 / (n as f64).sqrt() * 1.5, "mean {m}");
        }
        let mut frob = 0.0;
        for i in 0..10 {
            for j in 0..10 {
                let t = if i == j { 1.0 } else { 0.0 };
                frob += (cov[i][j] - t).powi(2);
            }
        }
        assert!(frob.sqrt() / 10f64.sqrt() < 0.1, "frobenius {}", frob.sqrt());
    }

    #[test]
    fn zero_step_is_identity() {
        let target = std_normal(3);
        let nuts = Nuts::new(0.0, Metric::unit(3));
        let q = vec![0.3, -1.0, 2.0];
        let d = nuts.transition(&q, &target, &mut seeded(1)).unwrap();
        assert_eq!(d.q, q);
    }

    #[test]
    fn leapfrog_energy_drift_is_tiny() {
        let target = std_normal(4);
        let metric = Metric::unit(4);
        let mut ts = TreeState {
            target: &target,
            metric: &metric,
            step: 1e-4,
            h0: 0.0,
            max_delta_h: 1000.0,
            n_leapfrog: 0,
            sum_metro: 0.0,
            divergent: false,
        };
        let q = vec![1.0, -0.5, 0.2, 0.7];
        let (logp, grad) = evaluate(&target, &q);
        let mut z = Point {
            q,
            p: vec![0.3, 0.1, -0.8, 1.1],
            logp,
            grad,
        };
        let h0 = ts.hamiltonian(&z);
        for _ in 0..1000 {
            ts.leapfrog(&mut z, 1.0);
        }
        assert!((ts.hamiltonian(&z) - h0).abs() < 1e-8);
    }

    #[test]
    fn constant_offset_does_not_change_draws() {
        let a = std_normal(5);
        let b = (5usize, |q: &[f64]| -> Result<(f64, Vec<f64>)> {
            Ok((-0.5 * dot(q, q) + 123.0, q.iter().map(|x| -x).collect()))
        });
        let nuts = Nuts::new(0.4, Metric::unit(5));
        let q = vec![0.1; 5];
        let da = nuts.transition(&q, &a, &mut seeded(8)).unwrap();
        let db = nuts.transition(&q, &b, &mut seeded(8)).unwrap();
        assert_eq!(da.q, db.q);
        assert_eq!(da.depth, db.depth);
    }

    #[test]
    fn dense_metric_momentum_covariance() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let m = Metric::dense(cov.clone()).unwrap();
        let mass = cov.try_inverse().unwrap();
        let mut rng = seeded(2);
        let n = 200_000;
        let mut acc = [0.0; 3];
        for _ in 0..n {
            let p = m.sample_momentum(&mut rng);
            acc[0] += p[0] * p[0];
            acc[1] += p[0] * p[1];
            acc[2] += p[1] * p[1];
        }
        assert!((acc[0] / n as f64 - mass[(0, 0)]).abs() < 0.02);
        assert!((acc[1] / n as f64 - mass[(0, 1)]).abs() < 0.02);
        assert!((acc[2] / n as f64 - mass[(1, 1)]).abs() < 0.02);
    }

    #[test]
    fn divergence_at_start_keeps_current_point() {
        let target = (1usize, |q: &[f64]| -> Result<(f64, Vec<f64>)> {
            if q[0].abs() < 1.0 {
                Ok((0.0, vec![0.0]))
            } else {
                Ok((f64::NEG_INFINITY, vec![0.0]))
            }
        });
        let nuts = Nuts::new(50.0, Metric::unit(1));
        let d = nuts.transition(&[0.0], &target, &mut seeded(4)).unwrap();
        assert!(d.divergent);
        assert_eq!(d.q, vec![0.0]);
    }

    #[test]
    fn schedule_windows_cover_slow_phase() {
        let s = AdaptSchedule::new(700);
        let ends = s.window_ends();
        assert_eq!(*ends.last().unwrap(), 700 - 50 - 1);
        assert!(ends.windows(2).all(|w| w[0] < w[1]));
    }
}
