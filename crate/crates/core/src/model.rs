//! Hierarchical illness-death model with Weibull baseline hazards, Gamma
//! patient frailties and multivariate-Normal hospital random effects.
//!
//! Three transition hazards act on each patient:
//!
//! * `g = 1`: readmission, while alive and not yet readmitted,
//! * `g = 2`: death without a prior readmission,
//! * `g = 3`: death after a readmission at `t1`.
//!
//! Each is `γ · h0g(u) · exp(xᵀβ_g + V_jg)` where `h0g(u) = α κ u^(α−1)` and
//! `u` is absolute time except for `g = 3` under the semi-Markov clock, where
//! the clock restarts at readmission (`u = t − t1`).
//!
//! The observed-data likelihood conditional on `(γ, V)` is the standard
//! four-case illness-death factorization; see [`log_likelihood_patient`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::real::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("Weibull parameters must be positive and finite (alpha={alpha}, kappa={kappa})")]
    NonPositiveParameter { alpha: f64, kappa: f64 },
    #[error("time must be {requirement}, got {t}")]
    InvalidTime { t: f64, requirement: &'static str },
    #[error("transition 3 needs the readmission time")]
    MissingReadmissionTime,
    #[error("transition 3 evaluated at t={t}, which is not after readmission at t1={t1}")]
    NotAfterReadmission { t: f64, t1: f64 },
    #[error("frailty must be positive and finite, got {0}")]
    NonPositiveFrailty(f64),
    #[error("transition {transition}: expected {expected} covariates, got {got}")]
    CovariateDimension {
        transition: usize,
        expected: usize,
        got: usize,
    },
    #[error("hospital index {index} out of range for {hospitals} hospitals")]
    HospitalOutOfRange { index: usize, hospitals: usize },
    #[error("frailty vector has {got} entries for {expected} patients")]
    FrailtyLength { expected: usize, got: usize },
    #[error("invalid model state: {0}")]
    InvalidState(String),
    #[error(transparent)]
    Record(#[from] RecordError),
}

/// Violations of the observation-level invariants.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecordError {
    #[error("times must be finite and non-negative (y1={y1}, y2={y2})")]
    BadTime { y1: f64, y2: f64 },
    #[error("y1={y1} exceeds y2={y2}")]
    Y1AfterY2 { y1: f64, y2: f64 },
    #[error("readmission and death coincide at t={t}; jitter one of the two times")]
    TiedReadmissionDeath { t: f64 },
    #[error("death without readmission requires y1 = y2 (y1={y1}, y2={y2})")]
    DeathTimeMismatch { y1: f64, y2: f64 },
    #[error("event recorded at time 0")]
    ZeroEventTime,
}

/// Which clock the post-readmission death hazard runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    /// `h3(t | t1) = h03(t)`.
    Markov,
    /// `h3(t | t1) = h03(t − t1)`.
    #[default]
    SemiMarkov,
}

/// Index of a transition in the illness-death model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transition {
    Readmission,
    DeathBeforeReadmission,
    DeathAfterReadmission,
}

impl Transition {
    pub const ALL: [Transition; 3] = [
        Transition::Readmission,
        Transition::DeathBeforeReadmission,
        Transition::DeathAfterReadmission,
    ];

    #[inline]
    pub fn index(self) -> usize {
        match self {
            Transition::Readmission => 0,
            Transition::DeathBeforeReadmission => 1,
            Transition::DeathAfterReadmission => 2,
        }
    }

    /// 1-based label (`g` in the model notation).
    pub fn number(self) -> usize {
        self.index() + 1
    }

    pub fn from_number(g: usize) -> Option<Self> {
        match g {
            1 => Some(Transition::Readmission),
            2 => Some(Transition::DeathBeforeReadmission),
            3 => Some(Transition::DeathAfterReadmission),
            _ => None,
        }
    }
}

/// One patient's semi-competing-risks observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord<T> {
    /// Dense hospital index in `0..J`.
    pub hospital: usize,
    /// `min(T1, T2, C)`.
    pub y1: T,
    pub delta1: bool,
    /// `min(T2, C)`.
    pub y2: T,
    pub delta2: bool,
    /// Covariates per transition (`x1`, `x2`, `x3`).
    pub x: [Vec<T>; 3],
}

impl<T: Real> PatientRecord<T> {
    pub fn validate(&self) -> Result<(), RecordError> {
        let (y1, y2) = (self.y1, self.y2);
        let bad = |t: T| !t.is_finite() || t < T::zero();
        if bad(y1) || bad(y2) {
            return Err(RecordError::BadTime {
                y1: y1.to_f64_lossy(),
                y2: y2.to_f64_lossy(),
            });
        }
        if y1 > y2 {
            return Err(RecordError::Y1AfterY2 {
                y1: y1.to_f64_lossy(),
                y2: y2.to_f64_lossy(),
            });
        }
        if self.delta1 {
            if y1 == T::zero() {
                return Err(RecordError::ZeroEventTime);
            }
            if y1 == y2 {
                return Err(RecordError::TiedReadmissionDeath {
                    t: y1.to_f64_lossy(),
                });
            }
        } else if self.delta2 && y1 != y2 {
            return Err(RecordError::DeathTimeMismatch {
                y1: y1.to_f64_lossy(),
                y2: y2.to_f64_lossy(),
            });
        }
        if self.delta2 && y2 == T::zero() {
            return Err(RecordError::ZeroEventTime);
        }
        Ok(())
    }

    /// Time at which the patient leaves the initial state (or is censored in it).
    #[inline]
    pub fn exit_time(&self) -> T {
        if self.delta1 {
            self.y1
        } else {
            self.y2
        }
    }
}

/// Weibull baseline and regression coefficients of one transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionParams<T> {
    pub alpha: T,
    pub kappa: T,
    pub beta: Vec<T>,
}

impl<T: Real> TransitionParams<T> {
    pub fn new(alpha: T, kappa: T, beta: Vec<T>) -> Self {
        Self { alpha, kappa, beta }
    }

    /// Unit Weibull (exponential, rate 1) with `p` zero coefficients.
    pub fn unit(p: usize) -> Self {
        Self::new(T::one(), T::one(), vec![T::zero(); p])
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        check_weibull(self.alpha, self.kappa)?;
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(ModelError::InvalidState("non-finite beta".into()));
        }
        Ok(())
    }
}

/// One state of the hierarchical model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub trans: [TransitionParams<T>; 3],
    /// Hospital random effects `V_j = (V_j1, V_j2, V_j3)`.
    pub v: Vec<[T; 3]>,
    pub sigma_v: [[T; 3]; 3],
    /// Frailty variance.
    pub theta: T,
    /// Patient frailties, aligned with the dataset's records.
    pub gamma: Vec<T>,
    pub clock: Clock,
}

impl<T: Real> ModelState<T> {
    /// Initial state: `β = 0`, `α = κ = 1`, `V = 0`, `Σ_V = I`, `θ = 1`, `γ = 1`.
    pub fn initial(dims: [usize; 3], hospitals: usize, patients: usize, clock: Clock) -> Self {
        let mut sigma_v = [[T::zero(); 3]; 3];
        for (i, row) in sigma_v.iter_mut().enumerate() {
            row[i] = T::one();
        }
        Self {
            trans: dims.map(TransitionParams::unit),
            v: vec![[T::zero(); 3]; hospitals],
            sigma_v,
            theta: T::one(),
            gamma: vec![T::one(); patients],
            clock,
        }
    }

    pub fn params(&self, g: Transition) -> &TransitionParams<T> {
        &self.trans[g.index()]
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for t in &self.trans {
            t.validate()?;
        }
        if !(self.theta > T::zero() && self.theta.is_finite()) {
            return Err(ModelError::InvalidState(format!(
                "theta must be positive, got {}",
                self.theta
            )));
        }
        if let Some(g) = self.gamma.iter().find(|g| !(**g > T::zero() && g.is_finite())) {
            return Err(ModelError::NonPositiveFrailty(g.to_f64_lossy()));
        }
        if self.v.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidState("non-finite random effect".into()));
        }
        if crate::linalg::cholesky3(&self.sigma_v).is_none() {
            return Err(ModelError::InvalidState(format!(
                "sigma_v is not symmetric positive definite: {:?}",
                self.sigma_v
            )));
        }
        Ok(())
    }

    /// Linear predictor `xᵀβ_g + V_jg`.
    pub fn linear_predictor(&self, g: Transition, x: &[T], j: usize) -> Result<T, ModelError> {
        let beta = &self.trans[g.index()].beta;
        if beta.len() != x.len() {
            return Err(ModelError::CovariateDimension {
                transition: g.number(),
                expected: beta.len(),
                got: x.len(),
            });
        }
        let v = self.v.get(j).ok_or(ModelError::HospitalOutOfRange {
            index: j,
            hospitals: self.v.len(),
        })?;
        Ok(dot(x, beta) + v[g.index()])
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
}

fn check_weibull<T: Real>(alpha: T, kappa: T) -> Result<(), ModelError> {
    let ok = |p: T| p > T::zero() && p.is_finite();
    if ok(alpha) && ok(kappa) {
        Ok(())
    } else {
        Err(ModelError::NonPositiveParameter {
            alpha: alpha.to_f64_lossy(),
            kappa: kappa.to_f64_lossy(),
        })
    }
}

/// Weibull hazard `α κ t^(α−1)`.
pub fn weibull_hazard<T: Real>(alpha: T, kappa: T, t: T) -> Result<T, ModelError> {
    check_weibull(alpha, kappa)?;
    if !(t > T::zero() && t.is_finite()) {
        return Err(ModelError::InvalidTime {
            t: t.to_f64_lossy(),
            requirement: "positive and finite",
        });
    }
    Ok(alpha * kappa * t.powf(alpha - T::one()))
}

/// Weibull cumulative hazard `κ t^α`.
pub fn weibull_cum_hazard<T: Real>(alpha: T, kappa: T, t: T) -> Result<T, ModelError> {
    check_weibull(alpha, kappa)?;
    if !(t >= T::zero() && t.is_finite()) {
        return Err(ModelError::InvalidTime {
            t: t.to_f64_lossy(),
            requirement: "non-negative and finite",
        });
    }
    if t == T::zero() {
        return Ok(T::zero());
    }
    Ok(kappa * t.powf(alpha))
}

/// Clock value fed to the baseline hazard of transition `g`.
fn clock_time<T: Real>(
    g: Transition,
    t: T,
    t1: Option<T>,
    clock: Clock,
) -> Result<T, ModelError> {
    if g != Transition::DeathAfterReadmission {
        return Ok(t);
    }
    let t1 = t1.ok_or(ModelError::MissingReadmissionTime)?;
    if !(t > t1) {
        return Err(ModelError::NotAfterReadmission {
            t: t.to_f64_lossy(),
            t1: t1.to_f64_lossy(),
        });
    }
    Ok(match clock {
        Clock::SemiMarkov => t - t1,
        Clock::Markov => t,
    })
}

/// Transition hazard `γ h0g(u) exp(xᵀβ_g + V_jg)` for patient covariates `x`
/// in hospital `j`.
pub fn transition_hazard<T: Real>(
    g: Transition,
    t: T,
    t1: Option<T>,
    x: &[T],
    state: &ModelState<T>,
    j: usize,
    gamma: T,
) -> Result<T, ModelError> {
    check_frailty(gamma)?;
    let u = clock_time(g, t, t1, state.clock)?;
    let p = state.params(g);
    let base = weibull_hazard(p.alpha, p.kappa, u)?;
    Ok(gamma * base * state.linear_predictor(g, x, j)?.exp())
}

/// Cumulative hazard of transition `g` accumulated over `(t1, t]` for `g = 3`,
/// or over `(0, t]` otherwise.
pub fn transition_cum_hazard<T: Real>(
    g: Transition,
    t: T,
    t1: Option<T>,
    x: &[T],
    state: &ModelState<T>,
    j: usize,
    gamma: T,
) -> Result<T, ModelError> {
    check_frailty(gamma)?;
    let p = state.params(g);
    let base = match g {
        Transition::DeathAfterReadmission => {
            let t1 = t1.ok_or(ModelError::MissingReadmissionTime)?;
            if t < t1 {
                return Err(ModelError::NotAfterReadmission {
                    t: t.to_f64_lossy(),
                    t1: t1.to_f64_lossy(),
                });
            }
            match state.clock {
                Clock::SemiMarkov => weibull_cum_hazard(p.alpha, p.kappa, t - t1)?,
                Clock::Markov => {
                    weibull_cum_hazard(p.alpha, p.kappa, t)?
                        - weibull_cum_hazard(p.alpha, p.kappa, t1)?
                }
            }
        }
        _ => weibull_cum_hazard(p.alpha, p.kappa, t)?,
    };
    Ok(gamma * base * state.linear_predictor(g, x, j)?.exp())
}

fn check_frailty<T: Real>(gamma: T) -> Result<(), ModelError> {
    if gamma > T::zero() && gamma.is_finite() {
        Ok(())
    } else {
        Err(ModelError::NonPositiveFrailty(gamma.to_f64_lossy()))
    }
}

/// Log of the observed-data density of one record conditional on its frailty
/// `gamma` and its hospital's random effects in `state`.
///
/// | (δ1, δ2) | contribution |
/// |---|---|
/// | (1, 1) | `log h1(y1) + log h3(y2∣y1) − H1(y1) − H2(y1) − ΔH3(y1, y2)` |
/// | (1, 0) | `log h1(y1) − H1(y1) − H2(y1) − ΔH3(y1, y2)` |
/// | (0, 1) | `log h2(y2) − H1(y2) − H2(y2)` |
/// | (0, 0) | `−H1(y2) − H2(y2)` |
///
/// `ΔH3` is the transition-3 cumulative hazard accrued between readmission and
/// `y2` on the configured clock.
pub fn log_likelihood_patient<T: Real>(
    record: &PatientRecord<T>,
    state: &ModelState<T>,
    gamma: T,
) -> Result<T, ModelError> {
    record.validate()?;
    let j = record.hospital;
    let [x1, x2, x3] = &record.x;
    use Transition::*;
    let (y1, y2) = (record.y1, record.y2);
    let ch = |g, t, t1, x: &[T]| transition_cum_hazard(g, t, t1, x, state, j, gamma);
    let hz = |g, t, t1, x: &[T]| transition_hazard(g, t, t1, x, state, j, gamma);
    let ll = match (record.delta1, record.delta2) {
        (true, death) => {
            let mut ll = hz(Readmission, y1, None, x1)?.ln()
                - ch(Readmission, y1, None, x1)?
                - ch(DeathBeforeReadmission, y1, None, x2)?
                - ch(DeathAfterReadmission, y2, Some(y1), x3)?;
            if death {
                ll += hz(DeathAfterReadmission, y2, Some(y1), x3)?.ln();
            }
            ll
        }
        (false, true) => {
            hz(DeathBeforeReadmission, y2, None, x2)?.ln()
                - ch(Readmission, y2, None, x1)?
                - ch(DeathBeforeReadmission, y2, None, x2)?
        }
        (false, false) => {
            -ch(Readmission, y2, None, x1)? - ch(DeathBeforeReadmission, y2, None, x2)?
        }
    };
    Ok(ll)
}

/// Sum of [`log_likelihood_patient`] over the dataset, using `state.gamma[i]`
/// for record `i`.
pub fn log_likelihood_total<T: Real>(
    dataset: &Dataset<T>,
    state: &ModelState<T>,
) -> Result<T, ModelError> {
    if state.gamma.len() != dataset.len() {
        return Err(ModelError::FrailtyLength {
            expected: dataset.len(),
            got: state.gamma.len(),
        });
    }
    dataset
        .records()
        .iter()
        .zip(&state.gamma)
        .try_fold(T::zero(), |acc, (r, g)| {
            Ok(acc + log_likelihood_patient(r, state, *g)?)
        })
}

/// Total cumulative hazard a patient accrues across the transitions they were
/// at risk for, at unit frailty. This is the rate increment in the frailty's
/// conjugate Gamma update.
pub fn integrated_hazard<T: Real>(
    record: &PatientRecord<T>,
    state: &ModelState<T>,
) -> Result<T, ModelError> {
    let j = record.hospital;
    let [x1, x2, x3] = &record.x;
    let exit = record.exit_time();
    let one = T::one();
    let mut total = transition_cum_hazard(Transition::Readmission, exit, None, x1, state, j, one)?
        + transition_cum_hazard(Transition::DeathBeforeReadmission, exit, None, x2, state, j, one)?;
    if record.delta1 {
        total += transition_cum_hazard(
            Transition::DeathAfterReadmission,
            record.y2,
            Some(record.y1),
            x3,
            state,
            j,
            one,
        )?;
    }
    Ok(total)
}

/// Validated collection of patient records with dense hospital indexing.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    records: Vec<PatientRecord<T>>,
    /// External label of each dense hospital index.
    hospital_ids: Vec<u64>,
    covariate_names: [Vec<String>; 3],
    by_hospital: Vec<Vec<usize>>,
}

impl<T: Real> Dataset<T> {
    /// Builds a dataset. `hospital_ids[j]` labels dense hospital index `j`;
    /// every hospital must own at least one record.
    pub fn new(
        records: Vec<PatientRecord<T>>,
        hospital_ids: Vec<u64>,
        covariate_names: [Vec<String>; 3],
    ) -> Result<Self, DatasetError> {
        let hospitals = hospital_ids.len();
        let mut by_hospital = vec![Vec::new(); hospitals];
        for (i, r) in records.iter().enumerate() {
            r.validate().map_err(|source| DatasetError::Record { row: i, source })?;
            for (g, names) in covariate_names.iter().enumerate() {
                if r.x[g].len() != names.len() {
                    return Err(DatasetError::CovariateCount {
                        row: i,
                        transition: g + 1,
                        expected: names.len(),
                        got: r.x[g].len(),
                    });
                }
            }
            if r.x.iter().flatten().any(|v| !v.is_finite()) {
                return Err(DatasetError::NonFiniteCovariate { row: i });
            }
            by_hospital
                .get_mut(r.hospital)
                .ok_or(DatasetError::HospitalOutOfRange {
                    row: i,
                    index: r.hospital,
                    hospitals,
                })?
                .push(i);
        }
        if let Some(j) = by_hospital.iter().position(Vec::is_empty) {
            return Err(DatasetError::EmptyHospital(hospital_ids[j]));
        }
        Ok(Self {
            records,
            hospital_ids,
            covariate_names,
            by_hospital,
        })
    }

    pub fn empty(covariate_dims: [usize; 3]) -> Self {
        Self {
            records: Vec::new(),
            hospital_ids: Vec::new(),
            covariate_names: covariate_dims
                .map(|p| (0..p).map(|k| format!("x{k}")).collect()),
            by_hospital: Vec::new(),
        }
    }

    pub fn records(&self) -> &[PatientRecord<T>] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_hospitals(&self) -> usize {
        self.hospital_ids.len()
    }

    pub fn hospital_ids(&self) -> &[u64] {
        &self.hospital_ids
    }

    /// Record indices belonging to dense hospital `j`.
    pub fn patients_in(&self, j: usize) -> &[usize] {
        &self.by_hospital[j]
    }

    pub fn covariate_names(&self) -> &[Vec<String>; 3] {
        &self.covariate_names
    }

    pub fn covariate_dims(&self) -> [usize; 3] {
        [0, 1, 2].map(|g| self.covariate_names[g].len())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("record {row}: {source}")]
    Record { row: usize, source: RecordError },
    #[error("record {row}: transition {transition} expects {expected} covariates, got {got}")]
    CovariateCount {
        row: usize,
        transition: usize,
        expected: usize,
        got: usize,
    },
    #[error("record {row}: non-finite covariate")]
    NonFiniteCovariate { row: usize },
    #[error("record {row}: hospital index {index} out of range ({hospitals} hospitals)")]
    HospitalOutOfRange {
        row: usize,
        index: usize,
        hospitals: usize,
    },
    #[error("hospital {0} has no patients")]
    EmptyHospital(u64),
}
