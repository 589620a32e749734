//! Multinomial no-U-turn sampler with a diagonal metric, dual-averaging step
//! size adaptation and windowed metric adaptation.
//!
//! The tree building, U-turn checks (including the checks across the two
//! halves of every subtree) and warmup schedule follow the conventions of
//! Stan's `diag_e_nuts` sampler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

/// A differentiable log density on ℝⁿ.
///
/// Returning a non-finite value marks the point as outside the support.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn logp_grad(&self, q: &[f64], grad: &mut [f64]) -> f64;
}

/// A log density whose unconstrained states map to named constrained values.
pub trait Posterior: LogDensity {
    fn param_names(&self) -> Vec<String>;
    fn constrain(&self, q: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("chain {chain}: log density not finite at 100 random initial points")]
    Initialization { chain: usize },
    #[error("chain {chain}: every one of {iterations} warmup iterations diverged")]
    AllDivergent { chain: usize, iterations: usize },
    #[error("chain {chain}: step size search failed: {reason}")]
    StepSize { chain: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup_iters: usize,
    pub sampling_iters: usize,
    pub target_accept: f64,
    pub max_tree_depth: u32,
    pub divergence_threshold: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup_iters: 2000,
            sampling_iters: 2000,
            target_accept: 0.95,
            max_tree_depth: 10,
            divergence_threshold: 1000.0,
            seed: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.chains == 0 {
            return Err(SamplerError::Config("chains must be at least 1".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(SamplerError::Config(format!(
                "target_accept must lie in (0, 1), got {}",
                self.target_accept
            )));
        }
        if self.max_tree_depth == 0 {
            return Err(SamplerError::Config("max_tree_depth must be at least 1".into()));
        }
        if !(self.divergence_threshold > 0.0) {
            return Err(SamplerError::Config(
                "divergence_threshold must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Post-warmup output of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub chain: usize,
    /// Constrained draws, one row per iteration.
    pub draws: Vec<Vec<f64>>,
    pub divergent: Vec<bool>,
    pub treedepth: Vec<u32>,
    pub stepsize: Vec<f64>,
    pub accept_stat: Vec<f64>,
    pub n_leapfrog: Vec<u32>,
    /// Unconstrained states, one row per iteration.
    pub unconstrained: Vec<Vec<f64>>,
    pub inv_metric: Vec<f64>,
    pub warmup_divergences: usize,
}

impl ChainOutput {
    pub fn divergences(&self) -> usize {
        self.divergent.iter().filter(|d| **d).count()
    }
}

/// Named draws from several chains.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    names: Vec<String>,
    chains: Vec<Vec<Vec<f64>>>,
}

impl PosteriorDraws {
    pub fn new(names: Vec<String>, chains: Vec<Vec<Vec<f64>>>) -> Self {
        Self { names, chains }
    }

    pub fn from_chains(names: Vec<String>, outputs: &[ChainOutput]) -> Self {
        Self {
            names,
            chains: outputs.iter().map(|c| c.draws.clone()).collect(),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn chains(&self) -> &[Vec<Vec<f64>>] {
        &self.chains
    }

    /// All rows of all chains, chain by chain.
    pub fn rows(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.chains.iter().flat_map(|c| c.iter())
    }

    /// Draws of parameter `i`, one vector per chain.
    pub fn column(&self, i: usize) -> Vec<Vec<f64>> {
        self.chains
            .iter()
            .map(|c| c.iter().map(|r| r[i]).collect())
            .collect()
    }

    /// Draws of parameter `i` pooled over chains.
    pub fn pooled(&self, i: usize) -> Vec<f64> {
        self.rows().map(|r| r[i]).collect()
    }
}

#[derive(Debug, Clone)]
struct PhasePoint {
    q: Vec<f64>,
    p: Vec<f64>,
    g: Vec<f64>,
    logp: f64,
}

fn kinetic(p: &[f64], inv_metric: &[f64]) -> f64 {
    0.5 * p.iter().zip(inv_metric).map(|(p, m)| p * p * m).sum::<f64>()
}

fn hamiltonian(z: &PhasePoint, inv_metric: &[f64]) -> f64 {
    let h = -z.logp + kinetic(&z.p, inv_metric);
    if h.is_nan() {
        f64::INFINITY
    } else {
        h
    }
}

fn p_sharp(p: &[f64], inv_metric: &[f64]) -> Vec<f64> {
    p.iter().zip(inv_metric).map(|(p, m)| p * m).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(a, b)| a + b).collect()
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// One velocity-Verlet step of size `eps` under a diagonal inverse metric.
///
/// Updates `q`, `p` and `grad` in place and returns the new log density.
/// A non-finite return signals that the step left the support.
pub fn leapfrog<T: LogDensity + ?Sized>(
    target: &T,
    q: &mut [f64],
    p: &mut [f64],
    grad: &mut [f64],
    eps: f64,
    inv_metric: &[f64],
) -> f64 {
    for (p, g) in p.iter_mut().zip(grad.iter()) {
        *p += 0.5 * eps * g;
    }
    for ((q, p), m) in q.iter_mut().zip(p.iter()).zip(inv_metric) {
        *q += eps * m * p;
    }
    let logp = target.logp_grad(q, grad);
    if !logp.is_finite() {
        return f64::NEG_INFINITY;
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return f64::NEG_INFINITY;
    }
    for (p, g) in p.iter_mut().zip(grad.iter()) {
        *p += 0.5 * eps * g;
    }
    logp
}

fn evolve<T: LogDensity + ?Sized>(target: &T, z: &mut PhasePoint, eps: f64, inv_metric: &[f64]) {
    z.logp = leapfrog(target, &mut z.q, &mut z.p, &mut z.g, eps, inv_metric);
}

/// Per-transition statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionStats {
    pub accept_stat: f64,
    pub treedepth: u32,
    pub n_leapfrog: u32,
    pub divergent: bool,
    pub energy: f64,
}

struct Tree<'a, T: ?Sized> {
    target: &'a T,
    inv_metric: &'a [f64],
    eps: f64,
    h0: f64,
    max_delta_h: f64,
    n_leapfrog: u32,
    sum_metro_prob: f64,
    divergent: bool,
}

fn criterion(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

impl<T: LogDensity + ?Sized> Tree<'_, T> {
    #[allow(clippy::too_many_arguments)]
    fn build(
        &mut self,
        rng: &mut ChaCha8Rng,
        z: &mut PhasePoint,
        depth: u32,
        sign: f64,
        z_propose: &mut PhasePoint,
        p_sharp_beg: &mut Vec<f64>,
        p_sharp_end: &mut Vec<f64>,
        rho: &mut Vec<f64>,
        p_beg: &mut Vec<f64>,
        p_end: &mut Vec<f64>,
        log_sum_weight: &mut f64,
    ) -> bool {
        if depth == 0 {
            evolve(self.target, z, sign * self.eps, self.inv_metric);
            self.n_leapfrog += 1;
            let h = hamiltonian(z, self.inv_metric);
            if h - self.h0 > self.max_delta_h {
                self.divergent = true;
            }
            *log_sum_weight = log_sum_exp(*log_sum_weight, self.h0 - h);
            self.sum_metro_prob += if self.h0 - h > 0.0 {
                1.0
            } else {
                (self.h0 - h).exp()
            };
            z_propose.clone_from(z);
            *p_sharp_beg = p_sharp(&z.p, self.inv_metric);
            p_sharp_end.clone_from(p_sharp_beg);
            for (r, p) in rho.iter_mut().zip(&z.p) {
                *r += p;
            }
            p_beg.clone_from(&z.p);
            p_end.clone_from(p_beg);
            return !self.divergent;
        }

        let n = z.q.len();
        let mut p_sharp_init_end = vec![0.0; n];
        let mut p_init_end = vec![0.0; n];
        let mut rho_init = vec![0.0; n];
        let mut log_sum_weight_init = f64::NEG_INFINITY;
        if !self.build(
            rng,
            z,
            depth - 1,
            sign,
            z_propose,
            p_sharp_beg,
            &mut p_sharp_init_end,
            &mut rho_init,
            p_beg,
            &mut p_init_end,
            &mut log_sum_weight_init,
        ) {
            return false;
        }

        let mut z_propose_final = z.clone();
        let mut rho_final = vec![0.0; n];
        let mut p_final_beg = vec![0.0; n];
        let mut p_sharp_final_beg = vec![0.0; n];
        let mut log_sum_weight_final = f64::NEG_INFINITY;
        if !self.build(
            rng,
            z,
            depth - 1,
            sign,
            &mut z_propose_final,
            &mut p_sharp_final_beg,
            p_sharp_end,
            &mut rho_final,
            &mut p_final_beg,
            p_end,
            &mut log_sum_weight_final,
        ) {
            return false;
        }

        let log_sum_weight_subtree = log_sum_exp(log_sum_weight_init, log_sum_weight_final);
        *log_sum_weight = log_sum_exp(*log_sum_weight, log_sum_weight_subtree);
        if log_sum_weight_final > log_sum_weight_subtree {
            *z_propose = z_propose_final;
        } else {
            let accept = (log_sum_weight_final - log_sum_weight_subtree).exp();
            if rng.random::<f64>() < accept {
                *z_propose = z_propose_final;
            }
        }

        let rho_subtree = add(&rho_init, &rho_final);
        for (r, s) in rho.iter_mut().zip(&rho_subtree) {
            *r += s;
        }
        let mut persist = criterion(p_sharp_beg, p_sharp_end, &rho_subtree);
        let rho_extended = add(&rho_init, &p_final_beg);
        persist &= criterion(p_sharp_beg, &p_sharp_final_beg, &rho_extended);
        let rho_extended = add(&rho_final, &p_init_end);
        persist &= criterion(&p_sharp_init_end, p_sharp_end, &rho_extended);
        persist
    }
}

/// One NUTS transition from `z` (position, log density and gradient must be
/// current). Replaces `z` with the selected state.
fn transition<T: LogDensity + ?Sized>(
    target: &T,
    z: &mut PhasePoint,
    eps: f64,
    inv_metric: &[f64],
    max_depth: u32,
    max_delta_h: f64,
    rng: &mut ChaCha8Rng,
) -> TransitionStats {
    let n = z.q.len();
    for (p, m) in z.p.iter_mut().zip(inv_metric) {
        let u: f64 = rng.sample(StandardNormal);
        *p = u / m.sqrt();
    }
    let mut tree = Tree {
        target,
        inv_metric,
        eps,
        h0: hamiltonian(z, inv_metric),
        max_delta_h,
        n_leapfrog: 0,
        sum_metro_prob: 0.0,
        divergent: false,
    };

    let p_sharp0 = p_sharp(&z.p, inv_metric);
    let mut p_fwd_fwd = z.p.clone();
    let mut p_sharp_fwd_fwd = p_sharp0.clone();
    let mut p_fwd_bck = z.p.clone();
    let mut p_sharp_fwd_bck = p_sharp0.clone();
    let mut p_bck_fwd = z.p.clone();
    let mut p_sharp_bck_fwd = p_sharp0.clone();
    let mut p_bck_bck = z.p.clone();
    let mut p_sharp_bck_bck = p_sharp0;
    let mut rho = z.p.clone();
    let mut log_sum_weight = 0.0;
    let mut depth = 0;

    let mut z_fwd = z.clone();
    let mut z_bck = z.clone();
    let mut z_sample = z.clone();
    let mut z_propose = z.clone();

    while depth < max_depth {
        let mut rho_fwd = vec![0.0; n];
        let mut rho_bck = vec![0.0; n];
        let mut log_sum_weight_subtree = f64::NEG_INFINITY;
        let valid = if rng.random::<f64>() > 0.5 {
            rho_bck.clone_from(&rho);
            p_bck_fwd.clone_from(&p_fwd_bck);
            p_sharp_bck_fwd.clone_from(&p_sharp_fwd_bck);
            let v = tree.build(
                rng,
                &mut z_fwd,
                depth,
                1.0,
                &mut z_propose,
                &mut p_sharp_fwd_bck,
                &mut p_sharp_fwd_fwd,
                &mut rho_fwd,
                &mut p_fwd_bck,
                &mut p_fwd_fwd,
                &mut log_sum_weight_subtree,
            );
            v
        } else {
            rho_fwd.clone_from(&rho);
            p_fwd_bck.clone_from(&p_bck_fwd);
            p_sharp_fwd_bck.clone_from(&p_sharp_bck_fwd);
            tree.build(
                rng,
                &mut z_bck,
                depth,
                -1.0,
                &mut z_propose,
                &mut p_sharp_bck_fwd,
                &mut p_sharp_bck_bck,
                &mut rho_bck,
                &mut p_bck_fwd,
                &mut p_bck_bck,
                &mut log_sum_weight_subtree,
            )
        };
        if !valid {
            break;
        }
        depth += 1;

        if log_sum_weight_subtree > log_sum_weight {
            z_sample.clone_from(&z_propose);
        } else {
            let accept = (log_sum_weight_subtree - log_sum_weight).exp();
            if rng.random::<f64>() < accept {
                z_sample.clone_from(&z_propose);
            }
        }
        log_sum_weight = log_sum_exp(log_sum_weight, log_sum_weight_subtree);

        rho = add(&rho_bck, &rho_fwd);
        let mut persist = criterion(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
        let rho_extended = add(&rho_bck, &p_fwd_bck);
        persist &= criterion(&p_sharp_bck_bck, &p_sharp_fwd_bck, &rho_extended);
        let rho_extended = add(&rho_fwd, &p_bck_fwd);
        persist &= criterion(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &rho_extended);
        if !persist {
            break;
        }
    }

    let accept_stat = if tree.n_leapfrog > 0 {
        tree.sum_metro_prob / tree.n_leapfrog as f64
    } else {
        0.0
    };
    let stats = TransitionStats {
        accept_stat,
        treedepth: depth,
        n_leapfrog: tree.n_leapfrog,
        divergent: tree.divergent,
        energy: hamiltonian(&z_sample, inv_metric),
    };
    *z = z_sample;
    stats
}

/// Dual-averaging step size adaptation.
#[derive(Debug, Clone)]
pub struct DualAveraging {
    pub mu: f64,
    pub delta: f64,
    pub gamma: f64,
    pub kappa: f64,
    pub t0: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl DualAveraging {
    pub fn new(delta: f64) -> Self {
        Self {
            mu: 0.5f64.ln(),
            delta,
            gamma: 0.05,
            kappa: 0.75,
            t0: 10.0,
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        }
    }

    pub fn restart(&mut self) {
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
    }

    /// Updates from one accept statistic and returns the next step size.
    pub fn learn(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let a = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - a);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let x_eta = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    /// Final (averaged) step size.
    pub fn final_stepsize(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Warmup window schedule: initial fast buffer, doubling slow windows and a
/// terminal fast buffer.
#[derive(Debug, Clone)]
pub struct WindowSchedule {
    num_warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_window: usize,
    counter: usize,
    pub enabled: bool,
}

impl WindowSchedule {
    pub fn new(num_warmup: usize) -> Self {
        let (mut init_buffer, mut term_buffer, mut base_window) = (75, 50, 25);
        let enabled = num_warmup >= 20;
        if enabled && init_buffer + base_window + term_buffer > num_warmup {
            init_buffer = (0.15 * num_warmup as f64) as usize;
            term_buffer = (0.1 * num_warmup as f64) as usize;
            base_window = num_warmup - (init_buffer + term_buffer);
        }
        Self {
            num_warmup,
            init_buffer,
            term_buffer,
            window_size: base_window,
            next_window: init_buffer + base_window - 1,
            counter: 0,
            enabled,
        }
    }

    fn in_window(&self) -> bool {
        self.counter >= self.init_buffer
            && self.counter < self.num_warmup - self.term_buffer
            && self.counter != self.num_warmup
    }

    fn end_of_window(&self) -> bool {
        self.counter == self.next_window && self.counter != self.num_warmup
    }

    fn compute_next_window(&mut self) {
        let last = self.num_warmup - self.term_buffer - 1;
        if self.next_window == last {
            return;
        }
        self.window_size *= 2;
        self.next_window = self.counter + self.window_size;
        if self.next_window != last {
            let boundary = self.next_window + 2 * self.window_size;
            if boundary >= self.num_warmup - self.term_buffer {
                self.next_window = last;
            }
        }
    }

    /// Window boundaries (inclusive end iterations) in order, for reporting.
    pub fn boundaries(num_warmup: usize) -> Vec<usize> {
        let mut s = Self::new(num_warmup);
        let mut out = Vec::new();
        if !s.enabled {
            return out;
        }
        for _ in 0..num_warmup {
            if s.end_of_window() {
                out.push(s.counter);
                s.compute_next_window();
            }
            s.counter += 1;
        }
        out
    }
}

/// Windowed diagonal-metric estimator.
#[derive(Debug, Clone)]
pub struct MetricAdaptation {
    schedule: WindowSchedule,
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl MetricAdaptation {
    pub fn new(num_warmup: usize, dim: usize) -> Self {
        Self {
            schedule: WindowSchedule::new(num_warmup),
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    /// Records a warmup state; returns true when `inv_metric` was updated.
    pub fn learn(&mut self, inv_metric: &mut [f64], q: &[f64]) -> bool {
        if !self.schedule.enabled {
            return false;
        }
        if self.schedule.in_window() {
            self.n += 1.0;
            for i in 0..q.len() {
                let d = q[i] - self.mean[i];
                self.mean[i] += d / self.n;
                self.m2[i] += d * (q[i] - self.mean[i]);
            }
        }
        if self.schedule.end_of_window() {
            self.schedule.compute_next_window();
            let n = self.n;
            for i in 0..inv_metric.len() {
                let var = self.m2[i] / (n - 1.0);
                inv_metric[i] = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0));
            }
            self.n = 0.0;
            self.mean.iter_mut().for_each(|v| *v = 0.0);
            self.m2.iter_mut().for_each(|v| *v = 0.0);
            self.schedule.counter += 1;
            return true;
        }
        self.schedule.counter += 1;
        false
    }
}

/// Heuristic initial step size: double or halve until the one-step
/// acceptance crosses 0.8.
fn init_stepsize<T: LogDensity + ?Sized>(
    target: &T,
    z: &PhasePoint,
    mut eps: f64,
    inv_metric: &[f64],
    rng: &mut ChaCha8Rng,
    chain: usize,
) -> Result<f64, SamplerError> {
    let sample_p = |rng: &mut ChaCha8Rng, z: &mut PhasePoint| {
        for (p, m) in z.p.iter_mut().zip(inv_metric) {
            let u: f64 = rng.sample(StandardNormal);
            *p = u / m.sqrt();
        }
    };
    let log08 = 0.8f64.ln();
    let mut trial = z.clone();
    sample_p(rng, &mut trial);
    let h0 = hamiltonian(&trial, inv_metric);
    evolve(target, &mut trial, eps, inv_metric);
    let direction = if h0 - hamiltonian(&trial, inv_metric) > log08 {
        1.0
    } else {
        -1.0
    };
    loop {
        let mut trial = z.clone();
        sample_p(rng, &mut trial);
        let h0 = hamiltonian(&trial, inv_metric);
        evolve(target, &mut trial, eps, inv_metric);
        let delta_h = h0 - hamiltonian(&trial, inv_metric);
        if direction == 1.0 && !(delta_h > log08) {
            break;
        }
        if direction == -1.0 && !(delta_h < log08) {
            break;
        }
        eps = if direction == 1.0 { 2.0 * eps } else { 0.5 * eps };
        if eps > 1e7 {
            return Err(SamplerError::StepSize {
                chain,
                reason: "step size exceeds 1e7; posterior may be improper".into(),
            });
        }
        if eps == 0.0 {
            return Err(SamplerError::StepSize {
                chain,
                reason: "no acceptably small step size".into(),
            });
        }
    }
    Ok(eps)
}

fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Runs one chain: initialization, warmup with adaptation, then sampling.
pub fn run_chain<P: Posterior + ?Sized>(
    target: &P,
    config: &SamplerConfig,
    chain: usize,
) -> Result<ChainOutput, SamplerError> {
    config.validate()?;
    let mut rng = chain_rng(config.seed, chain);
    let dim = target.dim();

    let mut z = None;
    for _ in 0..100 {
        let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut g = vec![0.0; dim];
        let logp = target.logp_grad(&q, &mut g);
        if logp.is_finite() && g.iter().all(|v| v.is_finite()) {
            z = Some(PhasePoint {
                q,
                p: vec![0.0; dim],
                g,
                logp,
            });
            break;
        }
    }
    let mut z = z.ok_or(SamplerError::Initialization { chain })?;

    let mut inv_metric = vec![1.0; dim];
    let mut eps = 1.0;
    let mut dual = DualAveraging::new(config.target_accept);
    let mut metric = MetricAdaptation::new(config.warmup_iters, dim);
    if config.warmup_iters > 0 {
        eps = init_stepsize(target, &z, eps, &inv_metric, &mut rng, chain)?;
        dual.mu = (10.0 * eps).ln();
    }
    let mut warmup_divergences = 0;
    for _ in 0..config.warmup_iters {
        let stats = transition(
            target,
            &mut z,
            eps,
            &inv_metric,
            config.max_tree_depth,
            config.divergence_threshold,
            &mut rng,
        );
        if stats.divergent {
            warmup_divergences += 1;
        }
        eps = dual.learn(stats.accept_stat);
        if metric.learn(&mut inv_metric, &z.q) {
            eps = init_stepsize(target, &z, eps, &inv_metric, &mut rng, chain)?;
            dual.mu = (10.0 * eps).ln();
            dual.restart();
        }
    }
    if config.warmup_iters > 0 {
        if warmup_divergences == config.warmup_iters {
            return Err(SamplerError::AllDivergent {
                chain,
                iterations: config.warmup_iters,
            });
        }
        eps = dual.final_stepsize();
    }

    let n = config.sampling_iters;
    let mut out = ChainOutput {
        chain,
        draws: Vec::with_capacity(n),
        divergent: Vec::with_capacity(n),
        treedepth: Vec::with_capacity(n),
        stepsize: Vec::with_capacity(n),
        accept_stat: Vec::with_capacity(n),
        n_leapfrog: Vec::with_capacity(n),
        unconstrained: Vec::with_capacity(n),
        inv_metric: Vec::new(),
        warmup_divergences,
    };
    for _ in 0..n {
        let stats = transition(
            target,
            &mut z,
            eps,
            &inv_metric,
            config.max_tree_depth,
            config.divergence_threshold,
            &mut rng,
        );
        out.draws.push(target.constrain(&z.q));
        out.unconstrained.push(z.q.clone());
        out.divergent.push(stats.divergent);
        out.treedepth.push(stats.treedepth);
        out.stepsize.push(eps);
        out.accept_stat.push(stats.accept_stat);
        out.n_leapfrog.push(stats.n_leapfrog);
    }
    out.inv_metric = inv_metric;
    Ok(out)
}

/// Runs `config.chains` independent chains in parallel. Chain `k` draws from
/// the `(seed, k)` random stream, so the output does not depend on thread count.
pub fn run_chains<P: Posterior + ?Sized>(
    target: &P,
    config: &SamplerConfig,
) -> Result<Vec<ChainOutput>, SamplerError> {
    config.validate()?;
    (0..config.chains)
        .into_par_iter()
        .map(|k| run_chain(target, config, k))
        .collect()
}
