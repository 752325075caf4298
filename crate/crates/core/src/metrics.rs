//! Cumulative incidence functions, standardized rates and the cumulative
//! excess readmission/mortality ratios.
//!
//! Time integrals use the graded composite Legendre rule from
//! [`crate::quadrature`]; expectations over the hospital random effects use a
//! tensor Gauss-Hermite rule on correlated nodes `V = √2 L x` with `Σ_V = LLᵀ`
//! and weights normalized by `π^(−d/2)`.
//!
//! The death CDF has two routes. [`DeathRoute::Nested`] integrates the
//! upper-wedge density `f_U(u, s)` over `0 < u < s < t` plus the death-first
//! density; [`DeathRoute::Collapsed`] performs the inner `s` integral in closed
//! form, giving
//!
//! `F2(t) = F∞(t) + ∫_0^t f1(u) (1 − exp(−ΔH3(u, t))) du`
//!
//! where `f1(u) = h1(u) exp(−H1(u) − H2(u))`. Both agree to quadrature error;
//! the collapsed route costs one integral instead of two nested ones.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{cholesky3, is_zero3};
use crate::model::{Clock, Dataset, ModelError, ModelState};
use crate::quadrature::{gauss_hermite_rule, LegendreScheme, QuadratureError, UnitRule};
use crate::real::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("sample {sample}: sigma_v is not positive definite: {sigma:?}")]
    Cholesky { sample: usize, sigma: [[f64; 3]; 3] },
    #[error("time grid must be positive, finite and strictly increasing")]
    BadGrid,
    #[error("time must be non-negative and finite, got {0}")]
    BadTime(f64),
    #[error("sample {sample} has {got} frailties for {expected} patients")]
    FrailtyLength {
        sample: usize,
        expected: usize,
        got: usize,
    },
    #[error("no posterior samples")]
    NoSamples,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeathRoute {
    #[default]
    Nested,
    Collapsed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateKind {
    Readmission,
    Death,
}

/// Quadrature settings for the rate computations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    pub legendre: LegendreScheme,
    pub hermite_nodes: usize,
    pub death_route: DeathRoute,
    /// Use `γ = 1` in numerator and denominator instead of the sampled frailty.
    pub gamma_one: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            legendre: LegendreScheme::default(),
            hermite_nodes: 5,
            death_route: DeathRoute::Collapsed,
            gamma_one: false,
        }
    }
}

impl MetricsConfig {
    /// Same settings with `k` nodes in every rule.
    pub fn with_nodes(mut self, k: usize) -> Self {
        self.legendre.nodes = k;
        self.hermite_nodes = k;
        self
    }
}

/// Legendre rules on the unit interval: graded toward 0, and toward both ends.
#[derive(Debug, Clone)]
pub struct TimeRules<T> {
    pub one_sided: UnitRule<T>,
    pub two_sided: UnitRule<T>,
}

impl<T: Real> TimeRules<T> {
    pub fn new(scheme: LegendreScheme) -> Result<Self, QuadratureError> {
        Ok(Self {
            one_sided: UnitRule::one_sided(scheme)?,
            two_sided: UnitRule::two_sided(scheme)?,
        })
    }
}

/// Fully specified hazards of one patient: `h_g(u) = c_g α_g u^(α_g − 1)` with
/// `c_g = γ κ_g exp(xᵀβ_g + V_g)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hazards<T> {
    pub alpha: [T; 3],
    pub scale: [T; 3],
    pub clock: Clock,
}

impl<T: Real> Hazards<T> {
    pub fn new(
        state: &ModelState<T>,
        x: &[Vec<T>; 3],
        v: [T; 3],
        gamma: T,
    ) -> Result<Self, ModelError> {
        let base = base_scales(state, x, gamma)?;
        Ok(Self {
            alpha: alphas(state),
            scale: [0, 1, 2].map(|g| base[g] * v[g].exp()),
            clock: state.clock,
        })
    }

    #[inline]
    fn hazard(&self, g: usize, u: T) -> T {
        self.scale[g] * self.alpha[g] * u.powf(self.alpha[g] - T::one())
    }

    #[inline]
    fn cum(&self, g: usize, u: T) -> T {
        self.scale[g] * u.powf(self.alpha[g])
    }

    /// `P(no event by t) = exp(−H1(t) − H2(t))`.
    pub fn survival(&self, t: T) -> T {
        if t <= T::zero() {
            return T::one();
        }
        (-self.cum(0, t) - self.cum(1, t)).exp()
    }

    #[inline]
    fn first_density(&self, g: usize, s: T) -> T {
        self.hazard(g, s) * (-self.cum(0, s) - self.cum(1, s)).exp()
    }

    /// Readmission CIF with death as a competing risk.
    pub fn cif_readmission(&self, t: T, rules: &TimeRules<T>) -> T {
        if t <= T::zero() {
            return T::zero();
        }
        rules.one_sided.integrate(T::zero(), t, |s| self.first_density(0, s))
    }

    /// Probability of dying without a prior readmission by `t`.
    pub fn cif_death_first(&self, t: T, rules: &TimeRules<T>) -> T {
        if t <= T::zero() {
            return T::zero();
        }
        rules.one_sided.integrate(T::zero(), t, |s| self.first_density(1, s))
    }

    /// `h3(s | u)` and `ΔH3(u, s)` given `s − u`.
    #[inline]
    fn third(&self, u: T, s: T, gap: T) -> (T, T) {
        match self.clock {
            Clock::SemiMarkov => (self.hazard(2, gap), self.cum(2, gap)),
            Clock::Markov => (self.hazard(2, s), self.cum(2, s) - self.cum(2, u)),
        }
    }

    /// CDF of death by `t` through either path.
    pub fn cdf_death(&self, t: T, rules: &TimeRules<T>, route: DeathRoute) -> T {
        if t <= T::zero() {
            return T::zero();
        }
        match route {
            DeathRoute::Nested => rules.one_sided.integrate(T::zero(), t, |s| {
                let wedge = rules.two_sided.integrate_with_gaps(T::zero(), s, |u, _, gap| {
                    let (h3, dh3) = self.third(u, s, gap);
                    self.first_density(0, u) * h3 * (-dh3).exp()
                });
                self.first_density(1, s) + wedge
            }),
            DeathRoute::Collapsed => {
                let readmitted = rules.two_sided.integrate_with_gaps(T::zero(), t, |u, _, gap| {
                    let (_, dh3) = self.third(u, t, gap);
                    -self.first_density(0, u) * (-dh3).exp_m1()
                });
                self.cif_death_first(t, rules) + readmitted
            }
        }
    }
}

fn alphas<T: Real>(state: &ModelState<T>) -> [T; 3] {
    [0, 1, 2].map(|g| state.trans[g].alpha)
}

/// `γ κ_g exp(xᵀβ_g)` per transition (hospital effect excluded).
fn base_scales<T: Real>(
    state: &ModelState<T>,
    x: &[Vec<T>; 3],
    gamma: T,
) -> Result<[T; 3], ModelError> {
    if !(gamma > T::zero() && gamma.is_finite()) {
        return Err(ModelError::NonPositiveFrailty(gamma.to_f64_lossy()));
    }
    let mut out = [T::zero(); 3];
    for g in 0..3 {
        let tp = &state.trans[g];
        tp.validate()?;
        if tp.beta.len() != x[g].len() {
            return Err(ModelError::CovariateDimension {
                transition: g + 1,
                expected: tp.beta.len(),
                got: x[g].len(),
            });
        }
        out[g] = gamma * tp.kappa * crate::model::dot(&x[g], &tp.beta).exp();
    }
    Ok(out)
}

/// Tensor Gauss-Hermite nodes for `V ~ N(0, Σ_V)`, stored as the
/// exponentiated effects `exp(V_g)` the hazards need.
///
/// The 2-D grid over `(V1, V2)` serves the readmission CIF; each 3-D node
/// refines one 2-D node with a `V3` coordinate.
#[derive(Debug, Clone)]
pub struct EffectGrid<T> {
    /// `(exp V1, exp V2)` per 2-D node.
    pub outer: Vec<[T; 2]>,
    pub outer_weights: Vec<T>,
    /// `(parent 2-D node, exp V3)` per 3-D node.
    pub inner: Vec<(usize, T)>,
    pub inner_weights: Vec<T>,
}

impl<T: Real> EffectGrid<T> {
    /// A single node at `v` with unit weight.
    pub fn point(v: [T; 3]) -> Self {
        Self {
            outer: vec![[v[0].exp(), v[1].exp()]],
            outer_weights: vec![T::one()],
            inner: vec![(0, v[2].exp())],
            inner_weights: vec![T::one()],
        }
    }

    /// Hermite grid with `k` nodes per dimension. An exactly-zero `Σ_V` is the
    /// degenerate distribution at 0 and yields [`EffectGrid::point`].
    pub fn hermite(sigma: &[[T; 3]; 3], k: usize) -> Result<Option<Self>, QuadratureError> {
        if is_zero3(sigma) {
            return Ok(Some(Self::point([T::zero(); 3])));
        }
        let Some(l) = cholesky3(sigma) else {
            return Ok(None);
        };
        let rule = gauss_hermite_rule::<T>(k)?;
        let r2 = T::two().sqrt();
        let pi = T::PI();
        let (mut outer, mut outer_weights) = (Vec::new(), Vec::new());
        let (mut inner, mut inner_weights) = (Vec::new(), Vec::new());
        for (xa, wa) in rule.iter() {
            for (xb, wb) in rule.iter() {
                let v1 = r2 * l[0][0] * xa;
                let v2 = r2 * (l[1][0] * xa + l[1][1] * xb);
                let parent = outer.len();
                outer.push([v1.exp(), v2.exp()]);
                outer_weights.push(wa * wb / pi);
                for (xc, wc) in rule.iter() {
                    let v3 = r2 * (l[2][0] * xa + l[2][1] * xb + l[2][2] * xc);
                    inner.push((parent, v3.exp()));
                    inner_weights.push(wa * wb * wc / (pi * pi.sqrt()));
                }
            }
        }
        Ok(Some(Self {
            outer,
            outer_weights,
            inner,
            inner_weights,
        }))
    }
}

/// `f1`/`f∞` ingredients at a set of time nodes: weight and, per transition
/// `g ∈ {1, 2}`, `α_g u^(α_g − 1)` and `u^α_g`.
#[derive(Debug, Clone, Default)]
struct FirstNodes<T> {
    w: Vec<T>,
    h1: Vec<T>,
    h2: Vec<T>,
    a1: Vec<T>,
    a2: Vec<T>,
}

impl<T: Real> FirstNodes<T> {
    fn push(&mut self, alpha: &[T; 3], u: T, w: T) {
        let one = T::one();
        self.w.push(w);
        self.h1.push(alpha[0] * u.powf(alpha[0] - one));
        self.h2.push(alpha[1] * u.powf(alpha[1] - one));
        self.a1.push(u.powf(alpha[0]));
        self.a2.push(u.powf(alpha[1]));
    }

    /// `exp(−c1 u^α1 − c2 u^α2)` at every node, written into `out`.
    fn survival(&self, c1: T, c2: T, out: &mut Vec<T>) {
        out.clear();
        out.extend(self.a1.iter().zip(&self.a2).map(|(a1, a2)| -(c1 * *a1 + c2 * *a2)));
        T::exp_in_place(out);
    }
}

/// Node-level quantities that depend on the shapes, the clock and the horizon
/// but not on the patient, so they are shared across a whole posterior sample.
#[derive(Debug, Clone)]
pub struct HorizonNodes<T> {
    t: T,
    route: DeathRoute,
    /// One-sided rule on `(0, t)` for `F1` and `F∞`.
    first: FirstNodes<T>,
    /// Readmission times `u` of the readmitted path: the two-sided rule on
    /// `(0, t)` (collapsed) or, concatenated per outer node `s_k`, on `(0, s_k)`
    /// (nested).
    wedge: FirstNodes<T>,
    /// `ΔH3` per unit scale at each wedge node.
    d3: Vec<T>,
    /// Nested only: `h3` per unit scale at each wedge node.
    h3: Vec<T>,
    /// Nested only: outer weight per segment of `segment` wedge nodes.
    outer_w: Vec<T>,
    segment: usize,
}

impl<T: Real> HorizonNodes<T> {
    pub fn new(alpha: [T; 3], clock: Clock, t: T, rules: &TimeRules<T>, route: DeathRoute) -> Self {
        let a3 = alpha[2];
        // (h3, ΔH3) per unit scale for readmission at u, evaluation at s
        let third = |u: T, s: T, gap: T| match clock {
            Clock::SemiMarkov => (a3 * gap.powf(a3 - T::one()), gap.powf(a3)),
            Clock::Markov => (a3 * s.powf(a3 - T::one()), s.powf(a3) - u.powf(a3)),
        };
        let mut first = FirstNodes::default();
        let one = &rules.one_sided;
        for i in 0..one.len() {
            first.push(&alpha, one.node(i, T::zero(), t), one.weights[i] * t);
        }
        let two = &rules.two_sided;
        let mut wedge = FirstNodes::default();
        let (mut d3, mut h3, mut outer_w) = (Vec::new(), Vec::new(), Vec::new());
        let mut add = |end: T, with_h3: bool| {
            for i in 0..two.len() {
                let u = two.node(i, T::zero(), end);
                let (h, d) = third(u, end, end * two.complements[i]);
                wedge.push(&alpha, u, two.weights[i] * end);
                d3.push(d);
                if with_h3 {
                    h3.push(h);
                }
            }
        };
        match route {
            DeathRoute::Collapsed => add(t, false),
            DeathRoute::Nested => {
                for k in 0..one.len() {
                    add(one.node(k, T::zero(), t), true);
                    outer_w.push(one.weights[k] * t);
                }
            }
        }
        Self {
            t,
            route,
            first,
            wedge,
            d3,
            h3,
            outer_w,
            segment: two.len(),
        }
    }

    pub fn horizon(&self) -> T {
        self.t
    }

    /// `(E[F1(t)], E[F2(t)])` over `grid` for a patient with base scales
    /// `base = γ κ_g exp(xᵀβ_g)`. Summation order is fixed.
    pub fn rates(&self, base: [T; 3], grid: &EffectGrid<T>) -> (T, T) {
        let mut surv = Vec::with_capacity(self.first.w.len().max(self.wedge.w.len()));
        let mut f1_total = T::zero();
        // per 2-D node: F∞, the weighted f1 at the wedge nodes, and their sum
        let mut death_first = Vec::with_capacity(grid.outer.len());
        let mut wedge: Vec<Vec<T>> = Vec::with_capacity(grid.outer.len());
        let mut wedge_total = Vec::with_capacity(grid.outer.len());
        for (e, w) in grid.outer.iter().zip(&grid.outer_weights) {
            let (c1, c2) = (base[0] * e[0], base[1] * e[1]);
            let n = &self.first;
            n.survival(c1, c2, &mut surv);
            let (mut f1, mut finf) = (T::zero(), T::zero());
            for i in 0..surv.len() {
                let ws = n.w[i] * surv[i];
                f1 += ws * c1 * n.h1[i];
                finf += ws * c2 * n.h2[i];
            }
            f1_total += *w * f1;
            death_first.push(finf);

            let n = &self.wedge;
            n.survival(c1, c2, &mut surv);
            let mut a: Vec<T> = (0..surv.len())
                .map(|i| n.w[i] * c1 * n.h1[i] * surv[i])
                .collect();
            if self.route == DeathRoute::Nested {
                for (x, h) in a.iter_mut().zip(&self.h3) {
                    *x *= *h;
                }
            }
            wedge_total.push(a.iter().copied().sum::<T>());
            wedge.push(a);
        }
        let mut f2_total = T::zero();
        for ((parent, e3), w) in grid.inner.iter().zip(&grid.inner_weights) {
            let c3 = base[2] * *e3;
            let a = &wedge[*parent];
            let readmitted = match self.route {
                // Σ a_i (1 − e^{−c3 d_i}) as a difference of sums; the
                // cancellation costs at most ~ε·F1
                DeathRoute::Collapsed => wedge_total[*parent] - T::weighted_exp_sum(a, &self.d3, c3),
                DeathRoute::Nested => {
                    let mut acc = T::zero();
                    for (k, ow) in self.outer_w.iter().enumerate() {
                        let seg = k * self.segment..(k + 1) * self.segment;
                        acc += *ow * T::weighted_exp_sum(&a[seg.clone()], &self.d3[seg], c3);
                    }
                    c3 * acc
                }
            };
            f2_total += *w * (death_first[*parent] + readmitted);
        }
        (f1_total, f2_total)
    }
}

fn check_time<T: Real>(t: T) -> Result<(), MetricsError> {
    if t >= T::zero() && t.is_finite() {
        Ok(())
    } else {
        Err(MetricsError::BadTime(t.to_f64_lossy()))
    }
}

/// Readmission CIF `F1(t)` of a patient with covariates `x` in hospital `j`.
pub fn cif_readmission<T: Real>(
    t: T,
    x: &[Vec<T>; 3],
    state: &ModelState<T>,
    j: usize,
    gamma: T,
    scheme: LegendreScheme,
) -> Result<T, MetricsError> {
    check_time(t)?;
    let hz = Hazards::new(state, x, hospital_effect(state, j)?, gamma)?;
    Ok(hz.cif_readmission(t, &TimeRules::new(scheme)?))
}

/// Death CDF `F2(t)` of a patient with covariates `x` in hospital `j`.
pub fn cdf_death<T: Real>(
    t: T,
    x: &[Vec<T>; 3],
    state: &ModelState<T>,
    j: usize,
    gamma: T,
    scheme: LegendreScheme,
    route: DeathRoute,
) -> Result<T, MetricsError> {
    check_time(t)?;
    let hz = Hazards::new(state, x, hospital_effect(state, j)?, gamma)?;
    Ok(hz.cdf_death(t, &TimeRules::new(scheme)?, route))
}

fn hospital_effect<T: Real>(state: &ModelState<T>, j: usize) -> Result<[T; 3], ModelError> {
    state.v.get(j).copied().ok_or(ModelError::HospitalOutOfRange {
        index: j,
        hospitals: state.v.len(),
    })
}

/// Expectation of `F1(t)` or `F2(t)` over `V ~ N(0, Σ_V)` for one patient.
pub fn standardized_rate<T: Real>(
    kind: RateKind,
    t: T,
    x: &[Vec<T>; 3],
    state: &ModelState<T>,
    gamma: T,
    config: &MetricsConfig,
) -> Result<T, MetricsError> {
    check_time(t)?;
    if t == T::zero() {
        return Ok(T::zero());
    }
    let grid = EffectGrid::hermite(&state.sigma_v, config.hermite_nodes)?.ok_or_else(|| {
        MetricsError::Cholesky {
            sample: 0,
            sigma: state.sigma_v.map(|r| r.map(Real::to_f64_lossy)),
        }
    })?;
    let gamma = if config.gamma_one { T::one() } else { gamma };
    let base = base_scales(state, x, gamma)?;
    let rules = TimeRules::new(config.legendre)?;
    let nodes = HorizonNodes::new(alphas(state), state.clock, t, &rules, config.death_route);
    let (f1, f2) = nodes.rates(base, &grid);
    Ok(match kind {
        RateKind::Readmission => f1,
        RateKind::Death => f2,
    })
}

/// Statistics stored per hospital, sample and horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RatioStatistic {
    MuA1,
    MuS1,
    Theta1,
    MuA2,
    MuS2,
    Theta2,
}

impl RatioStatistic {
    pub const ALL: [RatioStatistic; 6] = [
        RatioStatistic::MuA1,
        RatioStatistic::MuS1,
        RatioStatistic::Theta1,
        RatioStatistic::MuA2,
        RatioStatistic::MuS2,
        RatioStatistic::Theta2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RatioStatistic::MuA1 => "mu_A1",
            RatioStatistic::MuS1 => "mu_S1",
            RatioStatistic::Theta1 => "theta1",
            RatioStatistic::MuA2 => "mu_A2",
            RatioStatistic::MuS2 => "mu_S2",
            RatioStatistic::Theta2 => "theta2",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Per-sample rates and ratios of one hospital on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioSamples<T> {
    pub hospital: usize,
    pub times: Vec<T>,
    pub samples: usize,
    /// `values[stat][m * times.len() + k]`.
    values: [Vec<T>; 6],
    /// Entries whose `μ^S` was zero; their ratio is NaN.
    pub undefined: usize,
}

impl<T: Real> RatioSamples<T> {
    pub fn new(hospital: usize, times: Vec<T>, samples: usize) -> Self {
        let n = samples * times.len();
        Self {
            hospital,
            times,
            samples,
            values: std::array::from_fn(|_| vec![T::zero(); n]),
            undefined: 0,
        }
    }

    pub fn get(&self, stat: RatioStatistic, m: usize, k: usize) -> T {
        self.values[stat.index()][m * self.times.len() + k]
    }

    pub fn set(&mut self, stat: RatioStatistic, m: usize, k: usize, value: T) {
        let nt = self.times.len();
        self.values[stat.index()][m * nt + k] = value;
    }

    /// Draws of one statistic at grid index `k`, in sample order.
    pub fn draws(&self, stat: RatioStatistic, k: usize) -> Vec<T> {
        (0..self.samples).map(|m| self.get(stat, m, k)).collect()
    }
}

/// Cumulative excess readmission and mortality ratios of every hospital for
/// every posterior state on `grid`.
///
/// For state `m` and hospital `j`, `μ^A` averages the patients' CIFs at their
/// hospital's sampled effect `V_j`, `μ^S` averages their standardized rates,
/// and `θ = μ^A / μ^S`. Work is split across states; each state's sums run in
/// a fixed order, so results do not depend on the thread count.
pub fn excess_ratios<T: Real>(
    dataset: &Dataset<T>,
    states: &[ModelState<T>],
    grid: &[T],
    config: &MetricsConfig,
) -> Result<Vec<RatioSamples<T>>, MetricsError> {
    if states.is_empty() {
        return Err(MetricsError::NoSamples);
    }
    if grid.is_empty()
        || grid.iter().any(|t| !(*t > T::zero() && t.is_finite()))
        || grid.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(MetricsError::BadGrid);
    }
    let rules = TimeRules::new(config.legendre)?;
    let hospitals = dataset.n_hospitals();
    let per_state: Vec<Vec<[T; 4]>> = states
        .par_iter()
        .enumerate()
        .map(|(m, state)| sample_rates(dataset, state, m, grid, config, &rules))
        .collect::<Result<_, _>>()?;

    let nt = grid.len();
    let mut out: Vec<RatioSamples<T>> = (0..hospitals)
        .map(|j| RatioSamples::new(j, grid.to_vec(), states.len()))
        .collect();
    for (m, rows) in per_state.iter().enumerate() {
        for (j, rs) in out.iter_mut().enumerate() {
            for k in 0..nt {
                let [mu_a1, mu_s1, mu_a2, mu_s2] = rows[j * nt + k];
                let mut ratio = |num: T, den: T| {
                    if den > T::zero() {
                        num / den
                    } else {
                        rs.undefined += 1;
                        T::nan()
                    }
                };
                let (th1, th2) = (ratio(mu_a1, mu_s1), ratio(mu_a2, mu_s2));
                use RatioStatistic::*;
                for (stat, v) in [
                    (MuA1, mu_a1),
                    (MuS1, mu_s1),
                    (Theta1, th1),
                    (MuA2, mu_a2),
                    (MuS2, mu_s2),
                    (Theta2, th2),
                ] {
                    rs.set(stat, m, k, v);
                }
            }
        }
    }
    Ok(out)
}

/// `[μA1, μS1, μA2, μS2]` per `(hospital, horizon)` for one state.
fn sample_rates<T: Real>(
    dataset: &Dataset<T>,
    state: &ModelState<T>,
    m: usize,
    grid: &[T],
    config: &MetricsConfig,
    rules: &TimeRules<T>,
) -> Result<Vec<[T; 4]>, MetricsError> {
    if state.gamma.len() != dataset.len() {
        return Err(MetricsError::FrailtyLength {
            sample: m,
            expected: dataset.len(),
            got: state.gamma.len(),
        });
    }
    let population = EffectGrid::hermite(&state.sigma_v, config.hermite_nodes)?.ok_or_else(|| {
        MetricsError::Cholesky {
            sample: m,
            sigma: state.sigma_v.map(|r| r.map(Real::to_f64_lossy)),
        }
    })?;
    let horizons: Vec<HorizonNodes<T>> = grid
        .iter()
        .map(|t| HorizonNodes::new(alphas(state), state.clock, *t, rules, config.death_route))
        .collect();
    let nt = grid.len();
    let mut out = vec![[T::zero(); 4]; dataset.n_hospitals() * nt];
    for j in 0..dataset.n_hospitals() {
        let own = EffectGrid::point(hospital_effect(state, j)?);
        let patients = dataset.patients_in(j);
        let n = T::from_usize(patients.len()).expect("patient count fits");
        for &i in patients {
            let gamma = if config.gamma_one {
                T::one()
            } else {
                state.gamma[i]
            };
            let base = base_scales(state, &dataset.records()[i].x, gamma)?;
            for (k, nodes) in horizons.iter().enumerate() {
                let (a1, a2) = nodes.rates(base, &own);
                let (s1, s2) = nodes.rates(base, &population);
                let cell = &mut out[j * nt + k];
                cell[0] += a1;
                cell[1] += s1;
                cell[2] += a2;
                cell[3] += s2;
            }
        }
        for k in 0..nt {
            for v in out[j * nt + k].iter_mut() {
                *v /= n;
            }
        }
    }
    Ok(out)
}

/// Type-7 (linear interpolation) quantile of ascending `sorted` data.
pub fn quantile_sorted<T: Real>(sorted: &[T], p: f64) -> T {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = T::lit(h - lo as f64);
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioSummaryRow {
    pub hospital: usize,
    pub t: f64,
    pub statistic: String,
    pub median: f64,
    pub lo95: f64,
    pub hi95: f64,
}

/// Posterior median and central 95% interval of every statistic at every
/// horizon. Rows are ordered by time, then statistic. Any NaN draw makes the
/// row NaN.
pub fn posterior_ratio_summary<T: Real>(rs: &RatioSamples<T>) -> Vec<RatioSummaryRow> {
    let mut rows = Vec::with_capacity(rs.times.len() * 6);
    for (k, t) in rs.times.iter().enumerate() {
        for stat in RatioStatistic::ALL {
            let mut d: Vec<f64> = rs.draws(stat, k).into_iter().map(Real::to_f64_lossy).collect();
            let (median, lo95, hi95) = if d.is_empty() || d.iter().any(|v| v.is_nan()) {
                (f64::NAN, f64::NAN, f64::NAN)
            } else {
                d.sort_by(f64::total_cmp);
                (
                    quantile_sorted(&d, 0.5),
                    quantile_sorted(&d, 0.025),
                    quantile_sorted(&d, 0.975),
                )
            };
            rows.push(RatioSummaryRow {
                hospital: rs.hospital,
                t: t.to_f64_lossy(),
                statistic: stat.name().to_string(),
                median,
                lo95,
                hi95,
            });
        }
    }
    rows
}
