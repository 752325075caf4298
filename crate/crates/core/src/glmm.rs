//! Logistic-Normal GLMM comparator for a binary event-within-window outcome:
//! `logit P(Y* = 1) = x*ᵀβ* + V*_j` with `V*_j ~ N(0, σ²_v)`, fitted by
//! Metropolis-within-Gibbs, and the classical excess ratio
//! `θ_j = μ^a_j / μ^s_j` with `μ^s_j` integrated by 1-D Gauss-Hermite.
//!
//! The design matrix always carries an intercept in column 0.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mcmc::{AdaptiveBlock, BlockAcceptance, Counter};
use crate::model::Dataset;
use crate::quadrature::{gauss_hermite_rule, QuadratureError};
use crate::streams::{derive_seed, TAG_GLMM};

#[derive(Debug, Error)]
pub enum GlmmError {
    #[error("invalid GLMM configuration: {0}")]
    Config(String),
    #[error("window must be positive and finite, got {0}")]
    BadWindow(f64),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error("hospital index {hospital}, sample {sample}: standardized rate is zero")]
    ZeroRate { hospital: usize, sample: usize },
    #[error("no posterior samples")]
    NoSamples,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlmmTarget {
    Readmission,
    Death,
}

impl GlmmTarget {
    pub fn statistic_name(self) -> &'static str {
        match self {
            GlmmTarget::Readmission => "theta_glmm_readmit",
            GlmmTarget::Death => "theta_glmm_death",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryOutcomeRecord {
    /// Dense hospital index.
    pub hospital: usize,
    pub y_star: bool,
    /// Intercept first, then the patient covariates.
    pub x_star: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryData {
    pub records: Vec<BinaryOutcomeRecord>,
    pub hospitals: usize,
    pub by_hospital: Vec<Vec<usize>>,
    pub covariate_names: Vec<String>,
}

impl BinaryData {
    pub fn new(
        records: Vec<BinaryOutcomeRecord>,
        hospitals: usize,
        covariate_names: Vec<String>,
    ) -> Result<Self, GlmmError> {
        let p = covariate_names.len();
        let mut by_hospital = vec![Vec::new(); hospitals];
        for (i, r) in records.iter().enumerate() {
            if r.x_star.len() != p {
                return Err(GlmmError::Config(format!(
                    "record {i} has {} covariates, expected {p}",
                    r.x_star.len()
                )));
            }
            by_hospital
                .get_mut(r.hospital)
                .ok_or_else(|| GlmmError::Config(format!("record {i}: hospital out of range")))?
                .push(i);
        }
        Ok(Self {
            records,
            hospitals,
            by_hospital,
            covariate_names,
        })
    }

    pub fn dim(&self) -> usize {
        self.covariate_names.len()
    }
}

/// Event-within-window outcomes. Readmission: `δ1 = 1` and `y1 ≤ window`, so
/// death before readmission counts as no event. Death: `δ2 = 1` and
/// `y2 ≤ window`. Covariates come from transition 1 (readmission) or
/// transition 2 (death).
pub fn derive_binary_outcomes(
    dataset: &Dataset<f64>,
    t_window: f64,
    target: GlmmTarget,
) -> Result<BinaryData, GlmmError> {
    if !(t_window > 0.0 && t_window.is_finite()) {
        return Err(GlmmError::BadWindow(t_window));
    }
    let g = match target {
        GlmmTarget::Readmission => 0,
        GlmmTarget::Death => 1,
    };
    let records = dataset
        .records()
        .iter()
        .map(|r| {
            let y_star = match target {
                GlmmTarget::Readmission => r.delta1 && r.y1 <= t_window,
                GlmmTarget::Death => r.delta2 && r.y2 <= t_window,
            };
            let mut x_star = Vec::with_capacity(r.x[g].len() + 1);
            x_star.push(1.0);
            x_star.extend_from_slice(&r.x[g]);
            BinaryOutcomeRecord {
                hospital: r.hospital,
                y_star,
                x_star,
            }
        })
        .collect();
    let mut names = vec!["(intercept)".to_string()];
    names.extend(dataset.covariate_names()[g].iter().cloned());
    BinaryData::new(records, dataset.n_hospitals(), names)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlmmConfig {
    pub n_iter: u64,
    pub burnin: u64,
    pub thin: u64,
    pub seed: u64,
    #[serde(default)]
    pub chain: u64,
    /// `β* ~ N(0, beta_var I)`.
    #[serde(default = "default_var")]
    pub beta_var: f64,
    /// `σ²_v ~ IG(nu / 2, psi / 2)`, the one-dimensional inverse-Wishart.
    #[serde(default = "default_nu")]
    pub nu: f64,
    #[serde(default = "default_psi")]
    pub psi: f64,
    #[serde(default = "default_beta_scale")]
    pub beta_scale: f64,
    #[serde(default = "default_v_scale")]
    pub v_scale: f64,
    #[serde(default = "default_adapt")]
    pub adapt: bool,
}

fn default_var() -> f64 {
    100.0
}
fn default_nu() -> f64 {
    7.0
}
fn default_psi() -> f64 {
    1.0
}
fn default_beta_scale() -> f64 {
    0.1
}
fn default_v_scale() -> f64 {
    0.5
}
fn default_adapt() -> bool {
    true
}

impl Default for GlmmConfig {
    fn default() -> Self {
        Self {
            n_iter: 5000,
            burnin: 2000,
            thin: 5,
            seed: 1,
            chain: 0,
            beta_var: default_var(),
            nu: default_nu(),
            psi: default_psi(),
            beta_scale: default_beta_scale(),
            v_scale: default_v_scale(),
            adapt: true,
        }
    }
}

impl GlmmConfig {
    pub fn validate(&self) -> Result<(), GlmmError> {
        let fail = |m: &str| Err(GlmmError::Config(m.to_string()));
        if self.n_iter <= self.burnin {
            return fail("n_iter must exceed burnin");
        }
        if self.thin == 0 {
            return fail("thin must be at least 1");
        }
        if !(self.beta_var > 0.0 && self.nu > 0.0 && self.psi > 0.0) {
            return fail("prior parameters must be positive");
        }
        if !(self.beta_scale >= 0.0 && self.v_scale >= 0.0)
            || !self.beta_scale.is_finite()
            || !self.v_scale.is_finite()
        {
            return fail("proposal scales must be finite and non-negative");
        }
        Ok(())
    }

    pub fn retained(&self) -> u64 {
        (self.n_iter - self.burnin) / self.thin
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlmmSamples {
    pub beta: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub sigma2: Vec<f64>,
    pub acceptance: Vec<BlockAcceptance>,
}

impl GlmmSamples {
    pub fn len(&self) -> usize {
        self.sigma2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma2.is_empty()
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bernoulli log-likelihood `y η − log(1 + e^η)`.
fn bernoulli(y: bool, eta: f64) -> f64 {
    (if y { eta } else { 0.0 }) - softplus(eta)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Runs the GLMM chain: per sweep, `β*` (adaptive random walk), each `V*_j`
/// (scalar random walk) and `σ²_v` (inverse-Gamma Gibbs).
pub fn fit_glmm(data: &BinaryData, config: &GlmmConfig) -> Result<GlmmSamples, GlmmError> {
    config.validate()?;
    let p = data.dim();
    let n = data.records.len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TAG_GLMM, config.chain));
    let mut beta = vec![0.0; p];
    let mut v = vec![0.0; data.hospitals];
    let mut sigma2 = 1.0;
    let mut xb: Vec<f64> = vec![0.0; n];
    let target = if p > 1 { 0.23 } else { 0.44 };
    let mut beta_block = AdaptiveBlock::new(p, config.beta_scale, target);
    let mut v_blocks: Vec<AdaptiveBlock> = (0..data.hospitals)
        .map(|_| AdaptiveBlock::new(1, config.v_scale, 0.44))
        .collect();
    let mut counters = [Counter::default(); 2];
    let mut out = GlmmSamples {
        beta: Vec::new(),
        v: Vec::new(),
        sigma2: Vec::new(),
        acceptance: Vec::new(),
    };
    let decide = |delta: f64, rng: &mut ChaCha8Rng| -> (bool, f64, bool) {
        let u: f64 = rng.random();
        if !delta.is_finite() {
            return (false, 0.0, true);
        }
        let prob = delta.min(0.0).exp();
        (u < prob, prob, false)
    };
    for it in 0..config.n_iter {
        let burning = it < config.burnin;
        let adapt = burning && config.adapt;
        let mut record = |k: usize, acc: bool, nf: bool| {
            if !burning {
                counters[k].proposed += 1;
                counters[k].accepted += u64::from(acc);
                counters[k].nonfinite += u64::from(nf);
            }
        };

        if p == 0 || beta_block.frozen {
            record(0, true, false);
        } else {
            let proposal = beta_block.propose(&beta, &mut rng);
            let new_xb: Vec<f64> = data.records.iter().map(|r| dot(&r.x_star, &proposal)).collect();
            let mut delta = 0.0;
            for (i, r) in data.records.iter().enumerate() {
                let vj = v[r.hospital];
                delta += bernoulli(r.y_star, new_xb[i] + vj) - bernoulli(r.y_star, xb[i] + vj);
            }
            let sq = |b: &[f64]| b.iter().map(|x| x * x).sum::<f64>();
            delta -= 0.5 * (sq(&proposal) - sq(&beta)) / config.beta_var;
            let (acc, prob, nf) = decide(delta, &mut rng);
            if acc {
                beta = proposal;
                xb = new_xb;
            }
            record(0, acc, nf);
            if adapt {
                beta_block.adapt(it, prob, &beta, true);
            }
        }

        for j in 0..data.hospitals {
            if v_blocks[j].frozen {
                record(1, true, false);
                continue;
            }
            let cur = v[j];
            let prop = v_blocks[j].propose(&[cur], &mut rng)[0];
            let mut delta = -0.5 * (prop * prop - cur * cur) / sigma2;
            for &i in &data.by_hospital[j] {
                let y = data.records[i].y_star;
                delta += bernoulli(y, xb[i] + prop) - bernoulli(y, xb[i] + cur);
            }
            let (acc, prob, nf) = decide(delta, &mut rng);
            if acc {
                v[j] = prop;
            }
            record(1, acc, nf);
            if adapt {
                v_blocks[j].adapt(it, prob, &[v[j]], false);
            }
        }

        let shape = 0.5 * (config.nu + data.hospitals as f64);
        let rate = 0.5 * (config.psi + v.iter().map(|x| x * x).sum::<f64>());
        let precision = Gamma::new(shape, 1.0 / rate)
            .map_err(|e| GlmmError::Config(format!("variance conditional: {e}")))?
            .sample(&mut rng);
        sigma2 = 1.0 / precision;

        let done = it + 1;
        if done > config.burnin && (done - config.burnin) % config.thin == 0 {
            out.beta.push(beta.clone());
            out.v.push(v.clone());
            out.sigma2.push(sigma2);
        }
    }
    out.acceptance = ["beta", "v"]
        .iter()
        .zip(&counters)
        .map(|(name, c)| BlockAcceptance {
            block: name.to_string(),
            accepted: c.accepted,
            proposed: c.proposed,
            nonfinite: c.nonfinite,
            rate: c.rate(),
        })
        .collect();
    Ok(out)
}

/// Per-sample `μ^a`, `μ^s` and `θ = μ^a / μ^s`, each `M × J` sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmmRatios {
    pub mu_a: Vec<Vec<f64>>,
    pub mu_s: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
}

/// `μ^a_j = mean_i logit⁻¹(x*ᵀβ* + V*_j)`; `μ^s_j` replaces `V*_j` by its
/// `N(0, σ²_v)` expectation via a `k`-node Gauss-Hermite rule.
pub fn glmm_excess_ratio(
    data: &BinaryData,
    samples: &GlmmSamples,
    k: usize,
) -> Result<GlmmRatios, GlmmError> {
    if samples.is_empty() {
        return Err(GlmmError::NoSamples);
    }
    let rule = gauss_hermite_rule::<f64>(k)?;
    let norm = std::f64::consts::PI.sqrt();
    let mut out = GlmmRatios {
        mu_a: Vec::with_capacity(samples.len()),
        mu_s: Vec::with_capacity(samples.len()),
        theta: Vec::with_capacity(samples.len()),
    };
    for m in 0..samples.len() {
        let beta = &samples.beta[m];
        let sd = samples.sigma2[m].sqrt();
        let (mut a_row, mut s_row, mut t_row) = (Vec::new(), Vec::new(), Vec::new());
        for j in 0..data.hospitals {
            let members = &data.by_hospital[j];
            let n = members.len() as f64;
            let (mut a, mut s) = (0.0, 0.0);
            for &i in members {
                let xb = dot(&data.records[i].x_star, beta);
                a += inv_logit(xb + samples.v[m][j]);
                s += if sd == 0.0 {
                    inv_logit(xb)
                } else {
                    rule.apply(|x| inv_logit(xb + std::f64::consts::SQRT_2 * sd * x)) / norm
                };
            }
            let (a, s) = (a / n, s / n);
            if !(s > 0.0) {
                return Err(GlmmError::ZeroRate {
                    hospital: j,
                    sample: m,
                });
            }
            a_row.push(a);
            s_row.push(s);
            t_row.push(a / s);
        }
        out.mu_a.push(a_row);
        out.mu_s.push(s_row);
        out.theta.push(t_row);
    }
    Ok(out)
}
