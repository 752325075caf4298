//! Metropolis-within-Gibbs sampler for the Weibull illness-death model with
//! Gamma frailties and trivariate Normal hospital effects.
//!
//! One sweep updates, in order: the frailties (exact Gibbs), `β_1..β_3` and
//! `(log α_g, log κ_g)` (adaptive random-walk Metropolis), each `V_j`
//! (random-walk Metropolis), `Σ_V` (exact inverse-Wishart Gibbs) and `log θ`
//! (random-walk Metropolis). Proposal scales adapt during burn-in only.
//!
//! The per-patient likelihood is kept in cached pieces: for transition `g`,
//! `ℓ_g = d_g (log γ + log α_g + log κ_g + (α_g − 1) log u_g + η_g)
//! − γ κ_g B_g(α_g) e^{η_g}`, where `B_g(α)` is the patient's exposure
//! (`t^α` on the transition's clock) and `η_g = xᵀβ_g + V_jg`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::linalg::cholesky3;
use crate::model::{log_likelihood_patient, Clock, Dataset, ModelError, ModelState};
use crate::streams::{derive_seed, TAG_MCMC};

#[derive(Debug, Error)]
pub enum McmcError {
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("iteration {iteration}: {source}")]
    Model {
        iteration: u64,
        source: ModelError,
    },
    #[error("iteration {iteration}: non-finite integrated hazard for patient {patient}")]
    NonFiniteHazard { iteration: u64, patient: usize },
    #[error("iteration {iteration}: inverse-Wishart scale is not positive definite")]
    ScaleNotPositiveDefinite { iteration: u64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Prior hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Priors {
    /// `β_g ~ N(0, beta_var I)`.
    pub beta_var: f64,
    /// `log α_g, log κ_g ~ N(0, weibull_var)`.
    pub weibull_var: f64,
    /// `Σ_V ~ IW(psi, nu)`.
    pub psi: [[f64; 3]; 3],
    pub nu: f64,
    /// `1/θ ~ Gamma(theta_shape, rate = theta_rate)`.
    pub theta_shape: f64,
    pub theta_rate: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Self {
            beta_var: 100.0,
            weibull_var: 100.0,
            psi: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            nu: 7.0,
            theta_shape: 0.7,
            theta_rate: 0.7,
        }
    }
}

/// Initial random-walk proposal standard deviations. A zero scale freezes the
/// block: it never moves and reports acceptance 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalScales {
    pub beta: [f64; 3],
    /// On `(log α_g, log κ_g)`.
    pub weibull: [f64; 3],
    pub v: f64,
    pub log_theta: f64,
}

impl Default for ProposalScales {
    fn default() -> Self {
        Self {
            beta: [0.1; 3],
            weibull: [0.1; 3],
            v: 0.3,
            log_theta: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcConfig {
    pub n_iter: u64,
    pub burnin: u64,
    pub thin: u64,
    pub seed: u64,
    #[serde(default)]
    pub chain: u64,
    #[serde(default)]
    pub priors: Priors,
    #[serde(default)]
    pub scales: ProposalScales,
    #[serde(default)]
    pub clock: Clock,
    /// `θ → 0` limit: frailties fixed at 1 and `θ` not updated.
    #[serde(default)]
    pub gamma_one: bool,
    /// Adapt proposal scales during burn-in.
    #[serde(default = "yes")]
    pub adapt: bool,
}

fn yes() -> bool {
    true
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_iter: 5000,
            burnin: 2000,
            thin: 5,
            seed: 1,
            chain: 0,
            priors: Priors::default(),
            scales: ProposalScales::default(),
            clock: Clock::SemiMarkov,
            gamma_one: false,
            adapt: true,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<(), McmcError> {
        let fail = |m: &str| Err(McmcError::Config(m.to_string()));
        if self.n_iter <= self.burnin {
            return fail("n_iter must exceed burnin");
        }
        if self.thin == 0 {
            return fail("thin must be at least 1");
        }
        let p = &self.priors;
        if !(p.beta_var > 0.0 && p.weibull_var > 0.0) {
            return fail("prior variances must be positive");
        }
        if !(p.nu > 4.0) {
            return fail("inverse-Wishart degrees of freedom must exceed 4");
        }
        if cholesky3(&p.psi).is_none() {
            return fail("inverse-Wishart scale must be positive definite");
        }
        if !(p.theta_shape > 0.0 && p.theta_rate > 0.0) {
            return fail("theta prior parameters must be positive");
        }
        let s = &self.scales;
        let all = s.beta.iter().chain(&s.weibull).chain([&s.v, &s.log_theta]);
        for v in all {
            if !(*v >= 0.0 && v.is_finite()) {
                return fail("proposal scales must be finite and non-negative");
            }
        }
        Ok(())
    }

    /// Number of retained draws, `floor((n_iter − burnin) / thin)`.
    pub fn retained(&self) -> u64 {
        (self.n_iter - self.burnin) / self.thin
    }
}

/// Accept/propose counts of one Metropolis block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counter {
    pub accepted: u64,
    pub proposed: u64,
    /// Proposals rejected because the log-target was not finite.
    pub nonfinite: u64,
}

impl Counter {
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            1.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockAcceptance {
    pub block: String,
    pub accepted: u64,
    pub proposed: u64,
    pub nonfinite: u64,
    pub rate: f64,
}

/// Retained chain output.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub states: Vec<ModelState<f64>>,
    /// Row-major `M × N` per-patient log-likelihood (conditional on frailty).
    pub loglik: Vec<f64>,
    pub patients: usize,
    /// Post-burn-in acceptance per block.
    pub acceptance: Vec<BlockAcceptance>,
}

impl PosteriorSamples {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn loglik_row(&self, m: usize) -> &[f64] {
        &self.loglik[m * self.patients..(m + 1) * self.patients]
    }
}

/// Random-walk block with Robbins-Monro scale and, for vector blocks, a
/// running covariance (adaptive Metropolis with global scaling).
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct AdaptiveBlock {
    pub(crate) dim: usize,
    pub(crate) frozen: bool,
    pub(crate) log_lambda: f64,
    pub(crate) mean: Vec<f64>,
    /// Row-major `dim × dim`.
    pub(crate) cov: Vec<f64>,
    chol: Vec<f64>,
    target: f64,
}

impl AdaptiveBlock {
    pub(crate) fn new(dim: usize, scale: f64, target: f64) -> Self {
        let mut cov = vec![0.0; dim * dim];
        for i in 0..dim {
            cov[i * dim + i] = scale * scale;
        }
        let mut b = Self {
            dim,
            frozen: scale == 0.0,
            log_lambda: 0.0,
            mean: vec![0.0; dim],
            cov,
            chol: Vec::new(),
            target,
        };
        b.refresh();
        b
    }

    pub(crate) fn refresh(&mut self) {
        let d = self.dim;
        let mut jitter = 1e-12 * (0..d).map(|i| self.cov[i * d + i]).fold(0.0, f64::max);
        loop {
            if let Some(l) = cholesky_dense(&self.cov, d, jitter) {
                self.chol = l;
                return;
            }
            jitter = (jitter * 10.0).max(1e-12);
        }
    }

    pub(crate) fn propose(&self, current: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let d = self.dim;
        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let s = self.log_lambda.exp();
        (0..d)
            .map(|i| current[i] + s * (0..=i).map(|k| self.chol[i * d + k] * z[k]).sum::<f64>())
            .collect()
    }

    /// Robbins-Monro step on the global scale plus a covariance update at
    /// the new position, with step size `(t + 1)^(−0.6)`.
    pub(crate) fn adapt(&mut self, t: u64, accept_prob: f64, position: &[f64], track_cov: bool) {
        if self.frozen {
            return;
        }
        let eta = ((t + 1) as f64).powf(-0.6);
        self.log_lambda += eta * (accept_prob - self.target);
        if track_cov && self.dim > 1 && t >= 1 {
            let d = self.dim;
            if t == 1 {
                self.mean.copy_from_slice(position);
                return;
            }
            let diff: Vec<f64> = (0..d).map(|i| position[i] - self.mean[i]).collect();
            for i in 0..d {
                self.mean[i] += eta * diff[i];
                for k in 0..d {
                    self.cov[i * d + k] += eta * (diff[i] * diff[k] - self.cov[i * d + k]);
                }
            }
            self.refresh();
        }
    }
}

fn cholesky_dense(a: &[f64], d: usize, jitter: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j] + if i == j { jitter } else { 0.0 };
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s > 0.0 && s.is_finite()) {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// Static per-patient quantities.
#[derive(Debug, Clone)]
struct PatientCache {
    hospital: usize,
    /// Event indicators per transition.
    d: [f64; 3],
    /// `log u_g` at the event on transition `g`'s clock (0 when `d_g = 0`).
    ln_u: [f64; 3],
    /// Exposure logs: transitions 1 and 2 use `log(exit time)`; transition 3
    /// uses `log(y2 − y1)` (semi-Markov) or `(log y1, log y2)` (Markov).
    ln_exit: f64,
    ln_third: Option<(f64, f64)>,
}

fn build_cache(dataset: &Dataset<f64>, clock: Clock) -> Vec<PatientCache> {
    dataset
        .records()
        .iter()
        .map(|r| {
            let d1 = r.delta1;
            let d2 = r.delta2 && !r.delta1;
            let d3 = r.delta1 && r.delta2;
            let exit = r.exit_time();
            let ln_third = if r.delta1 {
                Some(match clock {
                    Clock::SemiMarkov => ((r.y2 - r.y1).ln(), f64::NAN),
                    Clock::Markov => (r.y1.ln(), r.y2.ln()),
                })
            } else {
                None
            };
            let ln_u3 = match clock {
                Clock::SemiMarkov => (r.y2 - r.y1).ln(),
                Clock::Markov => r.y2.ln(),
            };
            PatientCache {
                hospital: r.hospital,
                d: [d1, d2, d3].map(|b| if b { 1.0 } else { 0.0 }),
                ln_u: [
                    if d1 { r.y1.ln() } else { 0.0 },
                    if d2 { r.y2.ln() } else { 0.0 },
                    if d3 { ln_u3 } else { 0.0 },
                ],
                ln_exit: exit.ln(),
                ln_third,
            }
        })
        .collect()
}

impl PatientCache {
    fn exposure(&self, g: usize, alpha: f64, clock: Clock) -> f64 {
        match g {
            0 | 1 => (alpha * self.ln_exit).exp(),
            _ => match (self.ln_third, clock) {
                (None, _) => 0.0,
                (Some((ln_gap, _)), Clock::SemiMarkov) => (alpha * ln_gap).exp(),
                (Some((ln_y1, ln_y2)), Clock::Markov) => {
                    (alpha * ln_y2).exp() - (alpha * ln_y1).exp()
                }
            },
        }
    }
}

const BLOCK_NAMES: [&str; 8] = [
    "beta1", "beta2", "beta3", "weibull1", "weibull2", "weibull3", "v", "log_theta",
];

/// Sampler state: the current model state plus caches, adaptation and RNG.
pub struct Sampler<'a> {
    dataset: &'a Dataset<f64>,
    config: McmcConfig,
    state: ModelState<f64>,
    cache: Vec<PatientCache>,
    /// `exp(xᵀβ_g)` per patient and transition.
    exb: Vec<[f64; 3]>,
    /// `B_g(α_g)` per patient and transition.
    expo: Vec<[f64; 3]>,
    /// Per hospital and transition: event count.
    events: Vec<[f64; 3]>,
    sigma_inv: Matrix3<f64>,
    beta_blocks: [AdaptiveBlock; 3],
    weibull_blocks: [AdaptiveBlock; 3],
    v_blocks: Vec<AdaptiveBlock>,
    theta_block: AdaptiveBlock,
    /// Post-burn-in counters in [`BLOCK_NAMES`] order.
    counters: [Counter; 8],
    iteration: u64,
    rng: ChaCha8Rng,
}

impl<'a> Sampler<'a> {
    pub fn new(dataset: &'a Dataset<f64>, config: &McmcConfig) -> Result<Self, McmcError> {
        config.validate()?;
        let dims = dataset.covariate_dims();
        let mut state =
            ModelState::initial(dims, dataset.n_hospitals(), dataset.len(), config.clock);
        state.clock = config.clock;
        let cache = build_cache(dataset, config.clock);
        let mut events = vec![[0.0; 3]; dataset.n_hospitals()];
        for c in &cache {
            for g in 0..3 {
                events[c.hospital][g] += c.d[g];
            }
        }
        let target = |d: usize| if d > 1 { 0.23 } else { 0.44 };
        let sc = config.scales;
        let beta_blocks = [0, 1, 2].map(|g| AdaptiveBlock::new(dims[g], sc.beta[g], target(dims[g])));
        let weibull_blocks = [0, 1, 2].map(|g| AdaptiveBlock::new(2, sc.weibull[g], 0.23));
        let v_blocks = (0..dataset.n_hospitals())
            .map(|_| AdaptiveBlock::new(3, sc.v, 0.23))
            .collect();
        let mut s = Self {
            dataset,
            config: config.clone(),
            state,
            cache,
            exb: vec![[1.0; 3]; dataset.len()],
            expo: vec![[0.0; 3]; dataset.len()],
            events,
            sigma_inv: Matrix3::identity(),
            beta_blocks,
            weibull_blocks,
            v_blocks,
            theta_block: AdaptiveBlock::new(1, sc.log_theta, 0.44),
            counters: [Counter::default(); 8],
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TAG_MCMC, config.chain)),
        };
        s.refresh_caches();
        Ok(s)
    }

    pub fn state(&self) -> &ModelState<f64> {
        &self.state
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Replaces the model state (for tests and warm starts).
    pub fn set_state(&mut self, state: ModelState<f64>) -> Result<(), McmcError> {
        state.validate().map_err(|source| McmcError::Model {
            iteration: self.iteration,
            source,
        })?;
        if state.gamma.len() != self.dataset.len() || state.v.len() != self.dataset.n_hospitals()
        {
            return Err(McmcError::Config("state does not match the dataset".into()));
        }
        self.state = state;
        self.state.clock = self.config.clock;
        self.refresh_caches();
        Ok(())
    }

    fn refresh_caches(&mut self) {
        let clock = self.config.clock;
        for (i, r) in self.dataset.records().iter().enumerate() {
            for g in 0..3 {
                let tp = &self.state.trans[g];
                self.exb[i][g] = crate::model::dot(&r.x[g], &tp.beta).exp();
                self.expo[i][g] = self.cache[i].exposure(g, tp.alpha, clock);
            }
        }
        self.sigma_inv = to_matrix(&self.state.sigma_v)
            .try_inverse()
            .unwrap_or_else(Matrix3::identity);
    }

    fn burning(&self) -> bool {
        self.iteration < self.config.burnin
    }

    fn record(&mut self, block: usize, accepted: bool, nonfinite: bool) {
        if !self.burning() {
            let c = &mut self.counters[block];
            c.proposed += 1;
            c.accepted += u64::from(accepted);
            c.nonfinite += u64::from(nonfinite);
        }
    }

    /// Metropolis decision for log-ratio `delta`; returns
    /// `(accepted, acceptance probability, non-finite)`.
    fn decide(&mut self, delta: f64) -> (bool, f64, bool) {
        if !delta.is_finite() {
            // consume the uniform anyway so the stream does not depend on it
            let _: f64 = self.rng.random();
            return (false, 0.0, true);
        }
        let prob = delta.min(0.0).exp();
        let u: f64 = self.rng.random();
        (u < prob, prob, false)
    }

    /// Exact Gibbs draw of every frailty.
    pub fn update_gamma(&mut self) -> Result<(), McmcError> {
        if self.config.gamma_one {
            self.state.gamma.iter_mut().for_each(|g| *g = 1.0);
            return Ok(());
        }
        let phi = 1.0 / self.state.theta;
        for i in 0..self.cache.len() {
            let lambda = self.integrated_hazard(i);
            if !lambda.is_finite() {
                return Err(McmcError::NonFiniteHazard {
                    iteration: self.iteration,
                    patient: i,
                });
            }
            let c = &self.cache[i];
            let shape = phi + c.d[0] + c.d[1] + c.d[2];
            let rate = phi + lambda;
            let draw = Gamma::new(shape, 1.0 / rate)
                .map_err(|e| McmcError::Config(format!("frailty conditional: {e}")))?
                .sample(&mut self.rng);
            self.state.gamma[i] = draw.max(f64::MIN_POSITIVE);
        }
        Ok(())
    }

    /// `Λ_i` at unit frailty.
    fn integrated_hazard(&self, i: usize) -> f64 {
        let v = &self.state.v[self.cache[i].hospital];
        (0..3)
            .map(|g| self.state.trans[g].kappa * self.exb[i][g] * v[g].exp() * self.expo[i][g])
            .sum()
    }

    /// Random-walk Metropolis update of `β_g`.
    pub fn update_beta(&mut self, g: usize) {
        let block = &self.beta_blocks[g];
        if block.dim == 0 || block.frozen {
            self.record(g, true, false);
            return;
        }
        let current = self.state.trans[g].beta.clone();
        let proposal = block.propose(&current, &mut self.rng);
        let kappa = self.state.trans[g].kappa;
        let mut delta = 0.0;
        let mut new_exb = Vec::with_capacity(self.cache.len());
        for (i, r) in self.dataset.records().iter().enumerate() {
            let c = &self.cache[i];
            let xb_new = crate::model::dot(&r.x[g], &proposal);
            let e_new = xb_new.exp();
            let e_old = self.exb[i][g];
            let v = self.state.v[c.hospital][g].exp();
            delta += c.d[g] * (xb_new - e_old.ln())
                - self.state.gamma[i] * kappa * self.expo[i][g] * v * (e_new - e_old);
            new_exb.push(e_new);
        }
        let pv = self.config.priors.beta_var;
        delta -= 0.5 * (sumsq(&proposal) - sumsq(&current)) / pv;
        let (acc, prob, nonfinite) = self.decide(delta);
        if acc {
            self.state.trans[g].beta = proposal;
            for (i, e) in new_exb.into_iter().enumerate() {
                self.exb[i][g] = e;
            }
        }
        self.record(g, acc, nonfinite);
        if self.burning() && self.config.adapt {
            let pos = self.state.trans[g].beta.clone();
            self.beta_blocks[g].adapt(self.iteration, prob, &pos, true);
        }
    }

    /// Joint random-walk update of `(log α_g, log κ_g)`.
    pub fn update_weibull(&mut self, g: usize) {
        let block = 3 + g;
        if self.weibull_blocks[g].frozen {
            self.record(block, true, false);
            return;
        }
        let tp = &self.state.trans[g];
        let current = [tp.alpha.ln(), tp.kappa.ln()];
        let proposal = self.weibull_blocks[g].propose(&current, &mut self.rng);
        let (alpha, kappa) = (tp.alpha, tp.kappa);
        let (alpha_new, kappa_new) = (proposal[0].exp(), proposal[1].exp());
        let clock = self.config.clock;
        let mut delta = 0.0;
        let mut new_expo = Vec::with_capacity(self.cache.len());
        for (i, c) in self.cache.iter().enumerate() {
            let b_new = c.exposure(g, alpha_new, clock);
            let scale = self.state.gamma[i] * self.exb[i][g] * self.state.v[c.hospital][g].exp();
            delta += c.d[g]
                * ((proposal[0] - current[0]) + (proposal[1] - current[1])
                    + (alpha_new - alpha) * c.ln_u[g])
                - scale * (kappa_new * b_new - kappa * self.expo[i][g]);
            new_expo.push(b_new);
        }
        let pw = self.config.priors.weibull_var;
        delta -= 0.5 * (sumsq(&proposal) - sumsq(&current)) / pw;
        let (acc, prob, nonfinite) = self.decide(delta);
        if acc {
            self.state.trans[g].alpha = alpha_new;
            self.state.trans[g].kappa = kappa_new;
            for (i, b) in new_expo.into_iter().enumerate() {
                self.expo[i][g] = b;
            }
        }
        self.record(block, acc, nonfinite);
        if self.burning() && self.config.adapt {
            let tp = &self.state.trans[g];
            let pos = [tp.alpha.ln(), tp.kappa.ln()];
            self.weibull_blocks[g].adapt(self.iteration, prob, &pos, true);
        }
    }

    /// `Σ_{i∈j} γ_i κ_g B_ig exp(xᵀβ_g)` for every hospital.
    fn hospital_rates(&self) -> Vec<[f64; 3]> {
        let mut s = vec![[0.0; 3]; self.dataset.n_hospitals()];
        for (i, c) in self.cache.iter().enumerate() {
            for g in 0..3 {
                s[c.hospital][g] += self.state.gamma[i]
                    * self.state.trans[g].kappa
                    * self.expo[i][g]
                    * self.exb[i][g];
            }
        }
        s
    }

    fn update_v_with(&mut self, j: usize, rates: &[f64; 3]) {
        if self.v_blocks[j].frozen {
            self.record(6, true, false);
            return;
        }
        let current = self.state.v[j];
        let p = self.v_blocks[j].propose(&current, &mut self.rng);
        let proposal = [p[0], p[1], p[2]];
        let d = self.events[j];
        let mut delta = 0.0;
        for g in 0..3 {
            delta += d[g] * (proposal[g] - current[g])
                - rates[g] * (proposal[g].exp() - current[g].exp());
        }
        let quad = |v: &[f64; 3]| {
            let x = Vector3::from(*v);
            (x.transpose() * self.sigma_inv * x)[(0, 0)]
        };
        delta -= 0.5 * (quad(&proposal) - quad(&current));
        let (acc, prob, nonfinite) = self.decide(delta);
        if acc {
            self.state.v[j] = proposal;
        }
        self.record(6, acc, nonfinite);
        if self.burning() && self.config.adapt {
            let pos = self.state.v[j];
            self.v_blocks[j].adapt(self.iteration, prob, &pos, false);
        }
    }

    /// Random-walk update of hospital effect `V_j`.
    pub fn update_v(&mut self, j: usize) {
        let rates = self.hospital_rates();
        self.update_v_with(j, &rates[j]);
    }

    /// Exact draw `Σ_V ~ IW(Ψ + Σ_j V_j V_jᵀ, ν + J)`.
    pub fn update_sigma_v(&mut self) -> Result<(), McmcError> {
        let mut scale = to_matrix(&self.config.priors.psi);
        for v in &self.state.v {
            let x = Vector3::from(*v);
            scale += x * x.transpose();
        }
        let dof = self.config.priors.nu + self.state.v.len() as f64;
        let sigma = sample_inverse_wishart(&scale, dof, &mut self.rng).ok_or(
            McmcError::ScaleNotPositiveDefinite {
                iteration: self.iteration,
            },
        )?;
        self.state.sigma_v = from_matrix(&sigma);
        self.sigma_inv = sigma.try_inverse().ok_or(McmcError::ScaleNotPositiveDefinite {
            iteration: self.iteration,
        })?;
        Ok(())
    }

    /// Random-walk update of `log θ`.
    pub fn update_theta(&mut self) {
        if self.config.gamma_one || self.theta_block.frozen {
            self.record(7, true, false);
            return;
        }
        let current = self.state.theta.ln();
        let proposal = self.theta_block.propose(&[current], &mut self.rng)[0];
        let (sum_ln, sum) = self
            .state
            .gamma
            .iter()
            .fold((0.0, 0.0), |(a, b), g| (a + g.ln(), b + g));
        let n = self.state.gamma.len() as f64;
        let pr = &self.config.priors;
        let log_target = |psi: f64| {
            let phi = (-psi).exp();
            n * (phi * phi.ln() - ln_gamma(phi)) + (phi - 1.0) * sum_ln - phi * sum
                + pr.theta_shape * phi.ln()
                - pr.theta_rate * phi
        };
        let delta = log_target(proposal) - log_target(current);
        let (acc, prob, nonfinite) = self.decide(delta);
        if acc {
            self.state.theta = proposal.exp();
        }
        self.record(7, acc, nonfinite);
        if self.burning() && self.config.adapt {
            let pos = [self.state.theta.ln()];
            self.theta_block.adapt(self.iteration, prob, &pos, false);
        }
    }

    /// One systematic-scan sweep.
    pub fn sweep(&mut self) -> Result<(), McmcError> {
        self.update_gamma()?;
        for g in 0..3 {
            self.update_beta(g);
        }
        for g in 0..3 {
            self.update_weibull(g);
        }
        let rates = self.hospital_rates();
        for (j, r) in rates.iter().enumerate() {
            self.update_v_with(j, r);
        }
        self.update_sigma_v()?;
        self.update_theta();
        self.iteration += 1;
        Ok(())
    }

    /// Runs sweeps until `n_iter`, appending retained draws to `out`.
    pub fn run_until(&mut self, n_iter: u64, out: &mut PosteriorSamples) -> Result<(), McmcError> {
        let n_iter = n_iter.min(self.config.n_iter);
        while self.iteration < n_iter {
            self.sweep()?;
            let done = self.iteration;
            if done > self.config.burnin && (done - self.config.burnin) % self.config.thin == 0 {
                self.retain(out)?;
            }
        }
        out.acceptance = self.acceptance();
        Ok(())
    }

    fn retain(&self, out: &mut PosteriorSamples) -> Result<(), McmcError> {
        let iteration = self.iteration;
        self.state
            .validate()
            .map_err(|source| McmcError::Model { iteration, source })?;
        for (r, g) in self.dataset.records().iter().zip(&self.state.gamma) {
            let ll = log_likelihood_patient(r, &self.state, *g)
                .map_err(|source| McmcError::Model { iteration, source })?;
            out.loglik.push(ll);
        }
        out.states.push(self.state.clone());
        Ok(())
    }

    pub fn acceptance(&self) -> Vec<BlockAcceptance> {
        BLOCK_NAMES
            .iter()
            .zip(&self.counters)
            .map(|(name, c)| BlockAcceptance {
                block: name.to_string(),
                accepted: c.accepted,
                proposed: c.proposed,
                nonfinite: c.nonfinite,
                rate: c.rate(),
            })
            .collect()
    }

    pub fn empty_samples(&self) -> PosteriorSamples {
        PosteriorSamples {
            states: Vec::new(),
            loglik: Vec::new(),
            patients: self.dataset.len(),
            acceptance: Vec::new(),
        }
    }
}

fn sumsq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn to_matrix(a: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| a[i][j])
}

fn from_matrix(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| 0.5 * (m[(i, j)] + m[(j, i)])))
}

/// Bartlett draw of `Σ ~ IW(scale, dof)` in three dimensions: `Σ = W⁻¹` with
/// `W ~ Wishart(scale⁻¹, dof)`.
pub fn sample_inverse_wishart(
    scale: &Matrix3<f64>,
    dof: f64,
    rng: &mut ChaCha8Rng,
) -> Option<Matrix3<f64>> {
    let l = scale.try_inverse()?.cholesky()?.l();
    let mut a = Matrix3::zeros();
    for i in 0..3 {
        let chi = ChiSquared::new(dof - i as f64).ok()?.sample(rng);
        a[(i, i)] = chi.sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    let la = l * a;
    (la * la.transpose()).try_inverse()
}

/// Runs one chain from the initial state.
pub fn run_chain(dataset: &Dataset<f64>, config: &McmcConfig) -> Result<PosteriorSamples, McmcError> {
    let mut sampler = Sampler::new(dataset, config)?;
    let mut out = sampler.empty_samples();
    sampler.run_until(config.n_iter, &mut out)?;
    Ok(out)
}

/// Deviance information criterion `2 D̄ − D(θ̄)`, with the deviance at the
/// posterior mean of every state component (frailties included).
pub fn compute_dic(samples: &PosteriorSamples, dataset: &Dataset<f64>) -> Result<f64, McmcError> {
    if samples.is_empty() {
        return Err(McmcError::Config("DIC needs at least one sample".into()));
    }
    let m = samples.len() as f64;
    let mean_dev = (0..samples.len())
        .map(|k| -2.0 * samples.loglik_row(k).iter().sum::<f64>())
        .sum::<f64>()
        / m;
    let mean = posterior_mean_state(&samples.states);
    let ll: f64 = dataset
        .records()
        .iter()
        .zip(&mean.gamma)
        .map(|(r, g)| log_likelihood_patient(r, &mean, *g))
        .sum::<Result<f64, _>>()
        .map_err(|source| McmcError::Model {
            iteration: 0,
            source,
        })?;
    Ok(2.0 * mean_dev - (-2.0 * ll))
}

/// Componentwise posterior mean. A single state is returned unchanged.
pub fn posterior_mean_state(states: &[ModelState<f64>]) -> ModelState<f64> {
    if states.len() == 1 {
        return states[0].clone();
    }
    let m = states.len() as f64;
    let mut mean = states[0].clone();
    let avg = |f: &dyn Fn(&ModelState<f64>) -> f64| states.iter().map(f).sum::<f64>() / m;
    for g in 0..3 {
        mean.trans[g].alpha = avg(&|s| s.trans[g].alpha);
        mean.trans[g].kappa = avg(&|s| s.trans[g].kappa);
        for k in 0..mean.trans[g].beta.len() {
            mean.trans[g].beta[k] = avg(&|s| s.trans[g].beta[k]);
        }
    }
    for j in 0..mean.v.len() {
        for g in 0..3 {
            mean.v[j][g] = avg(&|s| s.v[j][g]);
        }
    }
    for a in 0..3 {
        for b in 0..3 {
            mean.sigma_v[a][b] = avg(&|s| s.sigma_v[a][b]);
        }
    }
    mean.theta = avg(&|s| s.theta);
    for i in 0..mean.gamma.len() {
        mean.gamma[i] = avg(&|s| s.gamma[i]);
    }
    mean
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lpml {
    pub lpml: f64,
    pub log_cpo: Vec<f64>,
    /// Patients whose CPO is not finite.
    pub flagged: Vec<usize>,
}

/// Log pseudo-marginal likelihood `Σ_i log CPO_i`, with
/// `log CPO_i = log M − logsumexp_m(−ℓ_mi)`.
pub fn compute_lpml(samples: &PosteriorSamples) -> Result<Lpml, McmcError> {
    if samples.is_empty() {
        return Err(McmcError::Config("LPML needs at least one sample".into()));
    }
    let m = samples.len();
    let n = samples.patients;
    let mut log_cpo = Vec::with_capacity(n);
    let mut flagged = Vec::new();
    for i in 0..n {
        let neg: Vec<f64> = (0..m).map(|k| -samples.loglik[k * n + i]).collect();
        let v = (m as f64).ln() - logsumexp(&neg);
        if !v.is_finite() {
            flagged.push(i);
        }
        log_cpo.push(v);
    }
    Ok(Lpml {
        lpml: log_cpo.iter().sum(),
        log_cpo,
        flagged,
    })
}

pub fn logsumexp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

const CHECKPOINT_MAGIC: &str = "semicomp-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Sampler snapshot that restores a chain bit for bit.
///
/// Text format, one record per line: a `# semicomp-checkpoint <version>` header,
/// then `key value...` lines with whitespace-separated columns. Floats are
/// written in shortest round-trip form.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub chain: u64,
    pub iteration: u64,
    pub word_pos: u128,
    fields: Vec<(String, Vec<String>)>,
}

impl Checkpoint {
    fn get(&self, key: &str) -> Result<&[String], McmcError> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| McmcError::Checkpoint(format!("missing key {key}")))
    }

    fn floats(&self, key: &str) -> Result<Vec<f64>, McmcError> {
        self.get(key)?
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| McmcError::Checkpoint(format!("{key}: bad number {s}")))
            })
            .collect()
    }

    fn ints(&self, key: &str) -> Result<Vec<u64>, McmcError> {
        self.get(key)?
            .iter()
            .map(|s| {
                s.parse::<u64>()
                    .map_err(|_| McmcError::Checkpoint(format!("{key}: bad integer {s}")))
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# {CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n");
        let _ = writeln!(s, "seed {}", self.seed);
        let _ = writeln!(s, "chain {}", self.chain);
        let _ = writeln!(s, "iteration {}", self.iteration);
        let _ = writeln!(s, "word_pos {}", self.word_pos);
        for (k, v) in &self.fields {
            let _ = writeln!(s, "{k} {}", v.join(" "));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, McmcError> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let expected = format!("# {CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
        if header.trim() != expected {
            return Err(McmcError::Checkpoint(format!("unsupported header {header:?}")));
        }
        let mut fields = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let mut cols = line.split_whitespace().map(str::to_string);
            let key = cols.next().unwrap_or_default();
            fields.push((key, cols.collect::<Vec<_>>()));
        }
        let mut cp = Self {
            seed: 0,
            chain: 0,
            iteration: 0,
            word_pos: 0,
            fields,
        };
        let one = |cp: &Self, k: &str| -> Result<String, McmcError> {
            cp.get(k)?
                .first()
                .cloned()
                .ok_or_else(|| McmcError::Checkpoint(format!("{k}: empty")))
        };
        let bad = |k: &str| McmcError::Checkpoint(format!("{k}: bad value"));
        cp.seed = one(&cp, "seed")?.parse().map_err(|_| bad("seed"))?;
        cp.chain = one(&cp, "chain")?.parse().map_err(|_| bad("chain"))?;
        cp.iteration = one(&cp, "iteration")?.parse().map_err(|_| bad("iteration"))?;
        cp.word_pos = one(&cp, "word_pos")?.parse().map_err(|_| bad("word_pos"))?;
        cp.fields
            .retain(|(k, _)| !matches!(k.as_str(), "seed" | "chain" | "iteration" | "word_pos"));
        Ok(cp)
    }

    pub fn write(&self, path: &Path) -> Result<(), McmcError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, McmcError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

fn fmt_floats<'b>(v: impl IntoIterator<Item = &'b f64>) -> Vec<String> {
    v.into_iter().map(|x| format!("{x}")).collect()
}

impl<'a> Sampler<'a> {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut fields: Vec<(String, Vec<String>)> = Vec::new();
        let mut put = |k: String, v: Vec<String>| fields.push((k, v));
        for g in 0..3 {
            let tp = &self.state.trans[g];
            put(format!("alpha{}", g + 1), fmt_floats([&tp.alpha]));
            put(format!("kappa{}", g + 1), fmt_floats([&tp.kappa]));
            put(format!("beta{}", g + 1), fmt_floats(&tp.beta));
        }
        put("v".into(), fmt_floats(self.state.v.iter().flatten()));
        put("sigma_v".into(), fmt_floats(self.state.sigma_v.iter().flatten()));
        put("theta".into(), fmt_floats([&self.state.theta]));
        put("gamma".into(), fmt_floats(&self.state.gamma));
        let blocks = self
            .beta_blocks
            .iter()
            .chain(&self.weibull_blocks)
            .chain(&self.v_blocks)
            .chain([&self.theta_block]);
        for (b, block) in blocks.enumerate() {
            put(format!("adapt{b}_lambda"), fmt_floats([&block.log_lambda]));
            put(format!("adapt{b}_mean"), fmt_floats(&block.mean));
            put(format!("adapt{b}_cov"), fmt_floats(&block.cov));
        }
        let counts = self
            .counters
            .iter()
            .flat_map(|c| [c.accepted, c.proposed, c.nonfinite])
            .map(|x| x.to_string())
            .collect();
        put("counters".into(), counts);
        Checkpoint {
            seed: self.config.seed,
            chain: self.config.chain,
            iteration: self.iteration,
            word_pos: self.rng.get_word_pos(),
            fields,
        }
    }

    /// Rebuilds a sampler from a checkpoint written under the same dataset and
    /// configuration.
    pub fn restore(
        dataset: &'a Dataset<f64>,
        config: &McmcConfig,
        cp: &Checkpoint,
    ) -> Result<Self, McmcError> {
        if cp.seed != config.seed || cp.chain != config.chain {
            return Err(McmcError::Checkpoint("seed or chain differs from config".into()));
        }
        let mut s = Self::new(dataset, config)?;
        let len_err = |k: &str| McmcError::Checkpoint(format!("{k}: wrong length"));
        for g in 0..3 {
            let n = g + 1;
            let tp = &mut s.state.trans[g];
            tp.alpha = *cp.floats(&format!("alpha{n}"))?.first().ok_or(len_err("alpha"))?;
            tp.kappa = *cp.floats(&format!("kappa{n}"))?.first().ok_or(len_err("kappa"))?;
            let beta = cp.floats(&format!("beta{n}"))?;
            if beta.len() != tp.beta.len() {
                return Err(len_err("beta"));
            }
            tp.beta = beta;
        }
        let v = cp.floats("v")?;
        if v.len() != 3 * s.state.v.len() {
            return Err(len_err("v"));
        }
        for (j, c) in v.chunks(3).enumerate() {
            s.state.v[j] = [c[0], c[1], c[2]];
        }
        let sig = cp.floats("sigma_v")?;
        if sig.len() != 9 {
            return Err(len_err("sigma_v"));
        }
        s.state.sigma_v = std::array::from_fn(|i| std::array::from_fn(|j| sig[3 * i + j]));
        s.state.theta = *cp.floats("theta")?.first().ok_or(len_err("theta"))?;
        let gamma = cp.floats("gamma")?;
        if gamma.len() != s.state.gamma.len() {
            return Err(len_err("gamma"));
        }
        s.state.gamma = gamma;
        let nb = 3 + 3 + s.v_blocks.len() + 1;
        for b in 0..nb {
            let block = match b {
                0..=2 => &mut s.beta_blocks[b],
                3..=5 => &mut s.weibull_blocks[b - 3],
                _ if b == nb - 1 => &mut s.theta_block,
                _ => &mut s.v_blocks[b - 6],
            };
            block.log_lambda = *cp
                .floats(&format!("adapt{b}_lambda"))?
                .first()
                .ok_or(len_err("lambda"))?;
            let mean = cp.floats(&format!("adapt{b}_mean"))?;
            let cov = cp.floats(&format!("adapt{b}_cov"))?;
            if mean.len() != block.dim || cov.len() != block.dim * block.dim {
                return Err(len_err("adaptation"));
            }
            block.mean = mean;
            block.cov = cov;
            block.refresh();
        }
        let counts = cp.ints("counters")?;
        if counts.len() != 24 {
            return Err(len_err("counters"));
        }
        for (c, v) in s.counters.iter_mut().zip(counts.chunks(3)) {
            *c = Counter {
                accepted: v[0],
                proposed: v[1],
                nonfinite: v[2],
            };
        }
        s.iteration = cp.iteration;
        s.rng.set_word_pos(cp.word_pos);
        s.refresh_caches();
        Ok(s)
    }
}
