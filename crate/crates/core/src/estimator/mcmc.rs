//! Adaptive random-walk Metropolis for the mean and standard deviation of a
//! Normal sample under box-uniform priors, with multi-chain diagnostics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSpec {
    pub mu_lo: f64,
    pub mu_hi: f64,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            mu_lo: crate::SCALE_MIN,
            mu_hi: crate::SCALE_MAX,
            sigma_lo: 0.1,
            sigma_hi: 300.0,
        }
    }
}

impl PriorSpec {
    pub fn contains(&self, mu: f64, sigma: f64) -> bool {
        (self.mu_lo..=self.mu_hi).contains(&mu) && (self.sigma_lo..=self.sigma_hi).contains(&sigma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub chains: usize,
    pub warmup: usize,
    /// Retained draws per chain before any extension.
    pub draws: usize,
    /// Each extension appends another `draws` iterations to every chain.
    pub max_extensions: u32,
    pub rhat_threshold: f64,
    pub ess_threshold: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            chains: 4,
            warmup: 1000,
            draws: 2000,
            max_extensions: 3,
            rhat_threshold: 1.01,
            ess_threshold: 400.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub rhat_mu: f64,
    pub rhat_sigma: f64,
    pub ess_mu: f64,
    pub ess_sigma: f64,
    pub chains: usize,
    pub draws_per_chain: usize,
    pub extensions: u32,
    pub acceptance_rate: f64,
    pub converged: bool,
}

impl Diagnostics {
    pub fn max_rhat(&self) -> f64 {
        self.rhat_mu.max(self.rhat_sigma)
    }

    pub fn min_ess(&self) -> f64 {
        self.ess_mu.min(self.ess_sigma)
    }
}

/// Log posterior of `(mu, sigma)` from the sufficient statistics of the sample.
#[derive(Debug, Clone, Copy)]
pub struct NormalTarget {
    n: f64,
    mean: f64,
    /// Sum of squared deviations from the sample mean.
    ss: f64,
    prior: PriorSpec,
}

impl NormalTarget {
    pub fn new(data: &[f64], prior: PriorSpec) -> Self {
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let ss = data.iter().map(|x| (x - mean).powi(2)).sum();
        NormalTarget { n, mean, ss, prior }
    }

    pub fn log_density(&self, mu: f64, sigma: f64) -> f64 {
        if !self.prior.contains(mu, sigma) {
            return f64::NEG_INFINITY;
        }
        -self.n * sigma.ln() - (self.ss + self.n * (self.mean - mu).powi(2)) / (2.0 * sigma * sigma)
    }

    fn sample_sd(&self) -> f64 {
        if self.n > 1.0 {
            (self.ss / (self.n - 1.0)).sqrt()
        } else {
            0.0
        }
    }
}

struct Chain {
    target: NormalTarget,
    rng: ChaCha8Rng,
    state: [f64; 2],
    log_p: f64,
    /// Lower Cholesky factor of the proposal covariance, times the step scale.
    chol: [f64; 3],
    draws: Vec<[f64; 2]>,
    accepted: usize,
    proposed: usize,
}

const TARGET_ACCEPT: f64 = 0.3;

impl Chain {
    fn new(target: NormalTarget, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior = target.prior;
        let sd = target.sample_sd().max(prior.sigma_lo);
        let se = sd / target.n.sqrt();
        let u1: f64 = rng.random_range(-1.0..1.0);
        let u2: f64 = rng.random_range(-1.0..1.0);
        let span_mu = (prior.mu_hi - prior.mu_lo) * 1e-6;
        let mu = (target.mean + 3.0 * se * u1).clamp(prior.mu_lo + span_mu, prior.mu_hi - span_mu);
        let sigma = (sd * (0.5 * u2).exp()).clamp(prior.sigma_lo * (1.0 + 1e-6), prior.sigma_hi * (1.0 - 1e-6));
        let mut chain = Chain {
            target,
            rng,
            state: [mu, sigma],
            log_p: target.log_density(mu, sigma),
            chol: [0.0; 3],
            draws: Vec::new(),
            accepted: 0,
            proposed: 0,
        };
        chain.set_proposal([se * se, 0.0, sd * sd / (2.0 * target.n)], 2.38 / 2f64.sqrt());
        chain
    }

    /// `cov` is `[var_mu, cov, var_sigma]`.
    fn set_proposal(&mut self, cov: [f64; 3], scale: f64) {
        let floor = 1e-12 * (1.0 + cov[0].abs() + cov[2].abs());
        let a = (cov[0] + floor).sqrt();
        let b = cov[1] / a;
        let c = (cov[2] + floor - b * b).max(floor).sqrt();
        self.chol = [a * scale, b * scale, c * scale];
    }

    fn step(&mut self) -> f64 {
        let z1: f64 = self.rng.sample(StandardNormal);
        let z2: f64 = self.rng.sample(StandardNormal);
        let [a, b, c] = self.chol;
        let mu = self.state[0] + a * z1;
        let sigma = self.state[1] + b * z1 + c * z2;
        let lp = self.target.log_density(mu, sigma);
        let log_ratio = lp - self.log_p;
        let accept_prob = if log_ratio >= 0.0 { 1.0 } else { log_ratio.exp() };
        let u: f64 = self.rng.random();
        self.proposed += 1;
        if u < accept_prob {
            self.state = [mu, sigma];
            self.log_p = lp;
            self.accepted += 1;
        }
        accept_prob
    }

    /// Warmup in four windows. Within a window the step scale follows a
    /// Robbins-Monro update toward the target acceptance rate; at the end of
    /// each of the first three windows the proposal shape is reset to the
    /// empirical covariance of that window.
    fn warmup(&mut self, iterations: usize) {
        let window = (iterations / 4).max(1);
        let mut log_scale = (2.38 / 2f64.sqrt()).ln();
        let s0 = log_scale.exp();
        let mut shape = self.chol.map(|v| v / s0);
        let mut acc = Welford::default();
        for i in 0..iterations {
            let p = self.step();
            log_scale += (p - TARGET_ACCEPT) / ((i % window) as f64 + 10.0).powf(0.6);
            let s = log_scale.exp();
            self.chol = [shape[0] * s, shape[1] * s, shape[2] * s];
            acc.push(self.state);
            if (i + 1) % window == 0 && (i + 1) / window < 4 && acc.n > 10 {
                let cov = acc.covariance();
                if cov[0] > 0.0 && cov[2] > 0.0 {
                    self.set_proposal(cov, 1.0);
                    shape = self.chol;
                    log_scale = (2.38 / 2f64.sqrt()).ln();
                    let s = log_scale.exp();
                    self.chol = [shape[0] * s, shape[1] * s, shape[2] * s];
                }
                acc = Welford::default();
            }
        }
        self.accepted = 0;
        self.proposed = 0;
    }

    fn sample(&mut self, iterations: usize) {
        self.draws.reserve(iterations);
        for _ in 0..iterations {
            self.step();
            self.draws.push(self.state);
        }
    }
}

#[derive(Default)]
struct Welford {
    n: usize,
    mean: [f64; 2],
    m2: [f64; 3],
}

impl Welford {
    fn push(&mut self, x: [f64; 2]) {
        self.n += 1;
        let n = self.n as f64;
        let d0 = x[0] - self.mean[0];
        let d1 = x[1] - self.mean[1];
        self.mean[0] += d0 / n;
        self.mean[1] += d1 / n;
        self.m2[0] += d0 * (x[0] - self.mean[0]);
        self.m2[1] += d0 * (x[1] - self.mean[1]);
        self.m2[2] += d1 * (x[1] - self.mean[1]);
    }

    fn covariance(&self) -> [f64; 3] {
        let d = (self.n - 1) as f64;
        [self.m2[0] / d, self.m2[1] / d, self.m2[2] / d]
    }
}

/// Retained chains for one group, ordered by chain index.
#[derive(Debug, Clone)]
pub struct GroupFit {
    pub chains: Vec<Vec<[f64; 2]>>,
    pub diagnostics: Diagnostics,
}

impl GroupFit {
    pub fn param(&self, k: usize) -> Vec<Vec<f64>> {
        self.chains.iter().map(|c| c.iter().map(|d| d[k]).collect()).collect()
    }
}

/// Runs `config.chains` chains in parallel, extending them until the
/// diagnostics pass or the extension budget is spent. Chain `c` is seeded
/// with `derive(seed, "chain/c")`.
pub fn sample_normal(data: &[f64], prior: PriorSpec, config: &McmcConfig, seed: u64) -> GroupFit {
    let target = NormalTarget::new(data, prior);
    let mut chains: Vec<Chain> = (0..config.chains.max(1))
        .map(|c| Chain::new(target, seeds::derive(seed, &format!("chain/{c}"))))
        .collect();
    chains.par_iter_mut().for_each(|c| {
        c.warmup(config.warmup);
        c.sample(config.draws);
    });
    let mut extensions = 0;
    loop {
        let diagnostics = diagnose(&chains, extensions, config);
        if diagnostics.converged || extensions >= config.max_extensions {
            return GroupFit {
                chains: chains.into_iter().map(|c| c.draws).collect(),
                diagnostics,
            };
        }
        extensions += 1;
        chains.par_iter_mut().for_each(|c| c.sample(config.draws));
    }
}

fn diagnose(chains: &[Chain], extensions: u32, config: &McmcConfig) -> Diagnostics {
    let mu: Vec<Vec<f64>> = chains.iter().map(|c| c.draws.iter().map(|d| d[0]).collect()).collect();
    let sigma: Vec<Vec<f64>> = chains.iter().map(|c| c.draws.iter().map(|d| d[1]).collect()).collect();
    let accepted: usize = chains.iter().map(|c| c.accepted).sum();
    let proposed: usize = chains.iter().map(|c| c.proposed).sum();
    let rhat_mu = split_rhat(&mu);
    let rhat_sigma = split_rhat(&sigma);
    let ess_mu = effective_sample_size(&mu);
    let ess_sigma = effective_sample_size(&sigma);
    Diagnostics {
        rhat_mu,
        rhat_sigma,
        ess_mu,
        ess_sigma,
        chains: chains.len(),
        draws_per_chain: chains.first().map_or(0, |c| c.draws.len()),
        extensions,
        acceptance_rate: accepted as f64 / proposed.max(1) as f64,
        converged: rhat_mu.max(rhat_sigma) < config.rhat_threshold
            && ess_mu.min(ess_sigma) > config.ess_threshold,
    }
}

/// Splits every chain in half, dropping a trailing odd draw.
fn split_chains(chains: &[Vec<f64>]) -> Vec<&[f64]> {
    let half = chains.iter().map(Vec::len).min().unwrap_or(0) / 2;
    chains
        .iter()
        .flat_map(|c| [&c[..half], &c[half..2 * half]])
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Within-chain mean variance and the pooled variance estimate.
fn variance_components(chains: &[&[f64]]) -> (f64, f64) {
    let m = chains.len() as f64;
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    let grand = mean(&means);
    let b_over_n = means.iter().map(|x| (x - grand).powi(2)).sum::<f64>() / (m - 1.0);
    (w, (n - 1.0) / n * w + b_over_n)
}

/// Potential scale reduction computed on split chains.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let split = split_chains(chains);
    if split.len() < 2 || split[0].len() < 2 {
        return f64::NAN;
    }
    let (w, var_plus) = variance_components(&split);
    if w == 0.0 {
        return if var_plus == 0.0 { 1.0 } else { f64::INFINITY };
    }
    (var_plus / w).sqrt()
}

/// Multi-chain effective sample size with Geyer's initial monotone sequence,
/// computed on split chains.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let split = split_chains(chains);
    if split.len() < 2 || split[0].len() < 4 {
        return f64::NAN;
    }
    let n = split[0].len();
    let total = (split.len() * n) as f64;
    let (w, var_plus) = variance_components(&split);
    if w == 0.0 {
        return if var_plus == 0.0 { total } else { 1.0 };
    }
    let means: Vec<f64> = split.iter().map(|c| mean(c)).collect();
    let acov_mean = |lag: usize| -> f64 {
        split
            .iter()
            .zip(&means)
            .map(|(c, mu)| (0..n - lag).map(|i| (c[i] - mu) * (c[i + lag] - mu)).sum::<f64>() / n as f64)
            .sum::<f64>()
            / split.len() as f64
    };
    let rho = |lag: usize| 1.0 - (w - acov_mean(lag)) / var_plus;

    let mut pairs: Vec<f64> = Vec::new();
    let mut lag = 0;
    while lag + 1 < n {
        let p = if lag == 0 { 1.0 + rho(1) } else { rho(lag) + rho(lag + 1) };
        if p <= 0.0 {
            break;
        }
        let p = pairs.last().map_or(p, |&prev: &f64| p.min(prev));
        pairs.push(p);
        lag += 2;
    }
    let tau = -1.0 + 2.0 * pairs.iter().sum::<f64>();
    let tau = tau.max(1.0 / total.log10().max(1.0));
    total / tau
}
