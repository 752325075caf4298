//! Forward simulation of clustered illness-death data with known truth.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{cholesky3, is_zero3};
use crate::model::{Clock, Dataset, DatasetError, ModelState, PatientRecord, TransitionParams};
use crate::streams::{stream, TAG_SIMULATE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("at least one hospital is required")]
    NoHospitals,
    #[error("hospital size must be at least 1 (got range {min}..={max})")]
    BadGroupSize { min: usize, max: usize },
    #[error("censoring time must be positive and finite, got {0}")]
    BadCensoring(f64),
    #[error("sigma_v must be symmetric positive definite or exactly zero")]
    BadSigma,
    #[error("theta must be positive and finite, got {0}")]
    BadTheta(f64),
    #[error("transition {transition}: {message}")]
    BadTransition { transition: usize, message: String },
    #[error("covariate {index}: binary probability {p} outside [0, 1]")]
    BadCovariate { index: usize, p: f64 },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Distribution of one simulated covariate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovariateSpec {
    Binary { p: f64 },
    Normal,
}

/// Patients per hospital: a fixed count or a uniform draw from `min..=max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroupSize {
    Fixed(usize),
    Range { min: usize, max: usize },
}

impl GroupSize {
    fn bounds(self) -> (usize, usize) {
        match self {
            GroupSize::Fixed(n) => (n, n),
            GroupSize::Range { min, max } => (min, max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub hospitals: usize,
    pub patients_per_hospital: GroupSize,
    /// Shared design: every transition sees the same covariate vector.
    pub covariates: Vec<CovariateSpec>,
    pub transitions: [TransitionParams<f64>; 3],
    /// An exactly-zero matrix switches hospital effects off (`V ≡ 0`).
    pub sigma_v: [[f64; 3]; 3],
    pub theta: f64,
    /// Force `γ ≡ 1` (the `θ → 0` limit).
    #[serde(default)]
    pub gamma_one: bool,
    #[serde(default)]
    pub clock: Clock,
    /// Administrative censoring time in days.
    pub censor_time: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        let t = |alpha, kappa, beta: Vec<f64>| TransitionParams::new(alpha, kappa, beta);
        Self {
            hospitals: 20,
            patients_per_hospital: GroupSize::Fixed(40),
            covariates: vec![CovariateSpec::Binary { p: 0.4 }, CovariateSpec::Normal],
            transitions: [
                t(0.9, 0.01, vec![0.3, 0.2]),
                t(1.1, 0.003, vec![0.2, 0.4]),
                t(0.8, 0.02, vec![0.1, 0.3]),
            ],
            sigma_v: [[0.3, 0.05, 0.0], [0.05, 0.2, 0.0], [0.0, 0.0, 0.2]],
            theta: 0.5,
            gamma_one: false,
            clock: Clock::SemiMarkov,
            censor_time: 90.0,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.hospitals == 0 {
            return Err(SimError::NoHospitals);
        }
        let (min, max) = self.patients_per_hospital.bounds();
        if min == 0 || min > max {
            return Err(SimError::BadGroupSize { min, max });
        }
        if !(self.censor_time > 0.0 && self.censor_time.is_finite()) {
            return Err(SimError::BadCensoring(self.censor_time));
        }
        if !is_zero3(&self.sigma_v) && cholesky3(&self.sigma_v).is_none() {
            return Err(SimError::BadSigma);
        }
        if !self.gamma_one && !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(SimError::BadTheta(self.theta));
        }
        for (g, tp) in self.transitions.iter().enumerate() {
            let bad = |message: String| SimError::BadTransition {
                transition: g + 1,
                message,
            };
            tp.validate().map_err(|e| bad(e.to_string()))?;
            if tp.beta.len() != self.covariates.len() {
                return Err(bad(format!(
                    "{} coefficients for {} covariates",
                    tp.beta.len(),
                    self.covariates.len()
                )));
            }
        }
        for (index, c) in self.covariates.iter().enumerate() {
            if let CovariateSpec::Binary { p } = *c {
                if !(0.0..=1.0).contains(&p) {
                    return Err(SimError::BadCovariate { index, p });
                }
            }
        }
        Ok(())
    }

    pub fn covariate_names(&self) -> Vec<String> {
        (1..=self.covariates.len()).map(|k| format!("z{k}")).collect()
    }
}

/// Latent quantities drawn alongside a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub transitions: [TransitionParams<f64>; 3],
    pub sigma_v: [[f64; 3]; 3],
    pub theta: f64,
    pub clock: Clock,
    pub hospital_ids: Vec<u64>,
    pub v: Vec<[f64; 3]>,
    pub gamma: Vec<f64>,
    /// Uncensored event times `(T1, T2)`; `T1` is `None` when death came first.
    pub event_times: Vec<(Option<f64>, f64)>,
}

impl SimTruth {
    /// The generating parameters as a model state.
    pub fn state(&self) -> ModelState<f64> {
        ModelState {
            trans: self.transitions.clone(),
            v: self.v.clone(),
            sigma_v: self.sigma_v,
            theta: self.theta,
            gamma: self.gamma.clone(),
            clock: self.clock,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Simulated {
    pub dataset: Dataset<f64>,
    pub truth: SimTruth,
}

struct Draw {
    record: PatientRecord<f64>,
    gamma: f64,
    times: (Option<f64>, f64),
}

/// Simulates a dataset. Hospital `j` (label `j + 1`) draws its size, random
/// effects and patients from its own stream, so the result is independent of
/// thread scheduling.
pub fn simulate_dataset(config: &SimConfig) -> Result<Simulated, SimError> {
    config.validate()?;
    let chol = cholesky3(&config.sigma_v);
    let per_hospital: Vec<([f64; 3], Vec<Draw>)> = (0..config.hospitals)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream(config.seed, TAG_SIMULATE, j as u64);
            let (min, max) = config.patients_per_hospital.bounds();
            let n = if min == max { min } else { rng.random_range(min..=max) };
            let v = match &chol {
                Some(l) => {
                    let z: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                    std::array::from_fn(|r| (0..=r).map(|c| l[r][c] * z[c]).sum())
                }
                None => [0.0; 3],
            };
            let draws = (0..n).map(|_| draw_patient(config, j, &v, &mut rng)).collect();
            (v, draws)
        })
        .collect();

    let names = config.covariate_names();
    let mut records = Vec::new();
    let mut gamma = Vec::new();
    let mut event_times = Vec::new();
    let mut v = Vec::with_capacity(config.hospitals);
    for (vj, draws) in per_hospital {
        v.push(vj);
        for d in draws {
            records.push(d.record);
            gamma.push(d.gamma);
            event_times.push(d.times);
        }
    }
    let hospital_ids: Vec<u64> = (1..=config.hospitals as u64).collect();
    let dataset = Dataset::new(
        records,
        hospital_ids.clone(),
        [names.clone(), names.clone(), names],
    )?;
    Ok(Simulated {
        dataset,
        truth: SimTruth {
            transitions: config.transitions.clone(),
            sigma_v: config.sigma_v,
            theta: config.theta,
            clock: config.clock,
            hospital_ids,
            v,
            gamma,
            event_times,
        },
    })
}

fn draw_patient(config: &SimConfig, j: usize, v: &[f64; 3], rng: &mut ChaCha8Rng) -> Draw {
    let x: Vec<f64> = config
        .covariates
        .iter()
        .map(|c| match *c {
            CovariateSpec::Binary { p } => f64::from(u8::from(rng.random_bool(p))),
            CovariateSpec::Normal => StandardNormal.sample(rng),
        })
        .collect();
    let gamma = if config.gamma_one {
        1.0
    } else {
        let shape = 1.0 / config.theta;
        Gamma::new(shape, config.theta)
            .expect("validated theta")
            .sample(rng)
            .max(f64::MIN_POSITIVE)
    };
    // scale c_g in h_g(t) = c_g α_g t^(α_g − 1)
    let scale: [f64; 3] = std::array::from_fn(|g| {
        let tp = &config.transitions[g];
        let lp: f64 = x.iter().zip(&tp.beta).map(|(a, b)| a * b).sum::<f64>() + v[g];
        gamma * tp.kappa * lp.exp()
    });
    let [a1, a2, a3] = [0, 1, 2].map(|g| config.transitions[g].alpha);
    let c = config.censor_time;

    let e: f64 = Exp1.sample(rng);
    let exit = first_exit_time([scale[0], scale[1]], [a1, a2], e);
    let mut record = PatientRecord {
        hospital: j,
        y1: c,
        delta1: false,
        y2: c,
        delta2: false,
        x: [x.clone(), x.clone(), x],
    };
    let Some(t) = exit else {
        return Draw {
            record,
            gamma,
            times: (None, f64::INFINITY),
        };
    };
    let h1 = scale[0] * a1 * t.powf(a1 - 1.0);
    let h2 = scale[1] * a2 * t.powf(a2 - 1.0);
    let u: f64 = rng.random();
    let readmitted = h1 > 0.0 && u * (h1 + h2) < h1;
    if !readmitted {
        if t < c {
            record.y1 = t;
            record.y2 = t;
            record.delta2 = true;
        }
        return Draw {
            record,
            gamma,
            times: (None, t),
        };
    }
    let e3: f64 = Exp1.sample(rng);
    let mut t2 = if scale[2] > 0.0 {
        match config.clock {
            Clock::SemiMarkov => t + (e3 / scale[2]).powf(1.0 / a3),
            Clock::Markov => (t.powf(a3) + e3 / scale[2]).powf(1.0 / a3),
        }
    } else {
        f64::INFINITY
    };
    if t2 <= t {
        t2 = t.next_up();
    }
    if t < c {
        record.y1 = t;
        record.delta1 = true;
        if t2 <= c {
            record.y2 = t2;
            record.delta2 = true;
        }
    }
    Draw {
        record,
        gamma,
        times: (Some(t), t2),
    }
}

/// Solves `c1 t^a1 + c2 t^a2 = e` for `t`, or `None` when both scales vanish.
///
/// In `s = ln t` the left side's logarithm is convex and increasing, so Newton
/// started to the right of the root descends monotonically onto it.
fn first_exit_time(c: [f64; 2], a: [f64; 2], e: f64) -> Option<f64> {
    let target = e.ln();
    let mut s = f64::NEG_INFINITY;
    for g in 0..2 {
        if c[g] > 0.0 {
            s = s.max((target - c[g].ln()) / a[g]);
        }
    }
    if s == f64::NEG_INFINITY {
        return None;
    }
    for _ in 0..200 {
        let terms = [0, 1].map(|g| if c[g] > 0.0 { (c[g].ln() + a[g] * s).exp() } else { 0.0 });
        let total = terms[0] + terms[1];
        let slope = (a[0] * terms[0] + a[1] * terms[1]) / total;
        let step = (total.ln() - target) / slope;
        if !step.is_finite() {
            break;
        }
        s -= step;
        if step.abs() <= 4.0 * f64::EPSILON * s.abs().max(1.0) {
            break;
        }
    }
    Some(s.exp())
}

/// Joint outcome counts within a horizon, in the order
/// (readmitted and died, readmitted only, died only, neither).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeTable {
    pub counts: [usize; 4],
}

impl OutcomeTable {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Cell proportions. An empty table reports everyone as "neither".
    pub fn proportions(&self) -> [f64; 4] {
        let n = self.total();
        if n == 0 {
            return [0.0, 0.0, 0.0, 1.0];
        }
        self.counts.map(|k| k as f64 / n as f64)
    }
}

pub fn outcome_table(dataset: &Dataset<f64>, t: f64) -> OutcomeTable {
    let mut counts = [0; 4];
    for r in dataset.records() {
        let readmit = r.delta1 && r.y1 <= t;
        let death = r.delta2 && r.y2 <= t;
        let cell = match (readmit, death) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        counts[cell] += 1;
    }
    OutcomeTable { counts }
}
