//! Loss-based hospital classification: top-k and quadrant classification
//! functions, misclassification losses, the approximate Bayes risk over
//! posterior samples, and three minimizers (exhaustive enumeration, a reduced
//! candidate space and sequential single-hospital updating).
//!
//! Labels are `u8`. Top-k labels are `1` for hospitals in the selected
//! (best-performing, smallest ratio) set and `0` otherwise. Quadrant labels are
//! `1..=4`: both ratios above 1, only the first, only the second, neither.
//!
//! Ties in ranks, in Bayes risk and in enumeration order are broken by
//! ascending hospital index or lexicographic label order.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::quantile_sorted;
use crate::streams::{stream, TAG_PROFILE};

/// Largest candidate space the exhaustive minimizer will scan.
pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;

/// Relative tolerance under which two Bayes risks count as equal.
const RISK_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProfilingError {
    #[error("ratio for hospital index {0} is not finite")]
    NonFinite(usize),
    #[error("top-k fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("epsilon must lie in (0, 0.5), got {0}")]
    BadEpsilon(f64),
    #[error("label vectors differ in length ({0} vs {1})")]
    Length(usize, usize),
    #[error("scheme mismatch: {0:?} vs {1:?}")]
    SchemeMismatch(Scheme, Scheme),
    #[error("label {label} at hospital index {hospital} is invalid for {scheme:?}")]
    BadLabel {
        hospital: usize,
        label: u8,
        scheme: Scheme,
    },
    #[error("invalid loss weights: {0}")]
    BadWeights(String),
    #[error("no posterior classifications supplied")]
    NoSamples,
    #[error("candidate space has {size} elements, above the brute-force bound of {limit}")]
    TooLarge { size: u128, limit: u128 },
    #[error("top-k start must select exactly {expected} hospitals, got {got}")]
    WrongCount { expected: usize, got: usize },
    #[error("sequential minimizer failed to decrease the Bayes risk ({before} -> {after})")]
    NotMonotone { before: f64, after: f64 },
}

/// Classification function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scheme {
    /// Label 1 iff `rank(θ_j1) < γ (J + 1)` with ascending ranks.
    Topk { gamma_frac: f64 },
    Quadrant,
}

impl Scheme {
    pub fn categories(&self) -> &'static [u8] {
        match self {
            Scheme::Topk { .. } => &[0, 1],
            Scheme::Quadrant => &[1, 2, 3, 4],
        }
    }

    fn slot(&self, label: u8) -> usize {
        match self {
            Scheme::Topk { .. } => label as usize,
            Scheme::Quadrant => label as usize - 1,
        }
    }

    fn valid(&self, label: u8) -> bool {
        self.categories().contains(&label)
    }

    fn same_kind(&self, other: &Scheme) -> bool {
        std::mem::discriminant(self) == std::mem::discriminant(other)
    }
}

/// Number of hospitals selected by the top-k rule: `|{r ∈ 1..=J : r < γ(J+1)}|`.
pub fn topk_count(j: usize, gamma_frac: f64) -> usize {
    let threshold = gamma_frac * (j + 1) as f64;
    (1..=j).take_while(|r| (*r as f64) < threshold).count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub labels: Vec<u8>,
    pub scheme: Scheme,
    /// Top-k only: the hospitals at ranks `k` and `k + 1` had equal ratios, so
    /// the index tie-break decided membership.
    pub boundary_tie: bool,
}

impl Classification {
    pub fn new(labels: Vec<u8>, scheme: Scheme) -> Result<Self, ProfilingError> {
        if let Some((hospital, &label)) = labels.iter().enumerate().find(|(_, l)| !scheme.valid(**l))
        {
            return Err(ProfilingError::BadLabel {
                hospital,
                label,
                scheme,
            });
        }
        Ok(Self {
            labels,
            scheme,
            boundary_tie: false,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn check_finite(values: &[f64]) -> Result<(), ProfilingError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(j) => Err(ProfilingError::NonFinite(j)),
        None => Ok(()),
    }
}

pub fn classify_topk(theta1: &[f64], gamma_frac: f64) -> Result<Classification, ProfilingError> {
    if !(gamma_frac > 0.0 && gamma_frac < 1.0) {
        return Err(ProfilingError::BadFraction(gamma_frac));
    }
    check_finite(theta1)?;
    let j = theta1.len();
    let mut order: Vec<usize> = (0..j).collect();
    order.sort_by(|a, b| theta1[*a].total_cmp(&theta1[*b]).then(a.cmp(b)));
    let k = topk_count(j, gamma_frac);
    let mut labels = vec![0u8; j];
    for &h in &order[..k] {
        labels[h] = 1;
    }
    let boundary_tie = k > 0 && k < j && theta1[order[k - 1]] == theta1[order[k]];
    Ok(Classification {
        labels,
        scheme: Scheme::Topk { gamma_frac },
        boundary_tie,
    })
}

pub fn quadrant_label(theta1: f64, theta2: f64) -> u8 {
    match (theta1 > 1.0, theta2 > 1.0) {
        (true, true) => 1,
        (true, false) => 2,
        (false, true) => 3,
        (false, false) => 4,
    }
}

pub fn classify_quadrant(theta1: &[f64], theta2: &[f64]) -> Result<Classification, ProfilingError> {
    if theta1.len() != theta2.len() {
        return Err(ProfilingError::Length(theta1.len(), theta2.len()));
    }
    check_finite(theta1)?;
    check_finite(theta2)?;
    let labels = theta1
        .iter()
        .zip(theta2)
        .map(|(a, b)| quadrant_label(*a, *b))
        .collect();
    Ok(Classification {
        labels,
        scheme: Scheme::Quadrant,
        boundary_tie: false,
    })
}

/// Misclassification penalties `w(true, chosen)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossSpec {
    /// Equal penalty for either mismatch direction.
    Topk { penalty: f64 },
    /// `weights[c - 1][c' - 1]` for truth `c`, classification `c'`.
    Quadrant { weights: [[f64; 4]; 4] },
}

impl LossSpec {
    pub fn unit_topk() -> Self {
        LossSpec::Topk { penalty: 1.0 }
    }

    pub fn unit_quadrant() -> Self {
        let mut weights = [[1.0; 4]; 4];
        for (c, row) in weights.iter_mut().enumerate() {
            row[c] = 0.0;
        }
        LossSpec::Quadrant { weights }
    }

    pub fn validate(&self) -> Result<(), ProfilingError> {
        match self {
            LossSpec::Topk { penalty } if !(*penalty >= 0.0 && penalty.is_finite()) => Err(
                ProfilingError::BadWeights(format!("penalty must be non-negative, got {penalty}")),
            ),
            LossSpec::Quadrant { weights } => {
                for (c, row) in weights.iter().enumerate() {
                    if row[c] != 0.0 {
                        return Err(ProfilingError::BadWeights("diagonal must be zero".into()));
                    }
                    if row.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
                        return Err(ProfilingError::BadWeights(
                            "weights must be finite and non-negative".into(),
                        ));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn matches(&self, scheme: &Scheme) -> bool {
        matches!(
            (self, scheme),
            (LossSpec::Topk { .. }, Scheme::Topk { .. }) | (LossSpec::Quadrant { .. }, Scheme::Quadrant)
        )
    }

    /// Penalty for labelling `chosen` when the truth is `truth`.
    pub fn weight(&self, truth: u8, chosen: u8) -> f64 {
        match self {
            LossSpec::Topk { penalty } => {
                if truth == chosen {
                    0.0
                } else {
                    *penalty
                }
            }
            LossSpec::Quadrant { weights } => weights[truth as usize - 1][chosen as usize - 1],
        }
    }
}

fn check_pair(a: &Classification, b: &Classification, spec: &LossSpec) -> Result<(), ProfilingError> {
    if !a.scheme.same_kind(&b.scheme) {
        return Err(ProfilingError::SchemeMismatch(a.scheme, b.scheme));
    }
    if !spec.matches(&a.scheme) {
        return Err(ProfilingError::SchemeMismatch(
            a.scheme,
            match spec {
                LossSpec::Topk { .. } => Scheme::Topk { gamma_frac: f64::NAN },
                LossSpec::Quadrant { .. } => Scheme::Quadrant,
            },
        ));
    }
    if a.len() != b.len() {
        return Err(ProfilingError::Length(a.len(), b.len()));
    }
    Ok(())
}

/// `L(Φ*; Φ⁰) = (1/J) Σ_j w(Φ⁰_j, Φ*_j)`.
pub fn loss(
    phi_star: &Classification,
    phi_0: &Classification,
    spec: &LossSpec,
) -> Result<f64, ProfilingError> {
    check_pair(phi_star, phi_0, spec)?;
    if phi_star.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = phi_star
        .labels
        .iter()
        .zip(&phi_0.labels)
        .map(|(s, t)| spec.weight(*t, *s))
        .sum();
    Ok(total / phi_star.len() as f64)
}

/// `BR̂(Φ*) = (1/M) Σ_m L(Φ*; Φ⁽ᵐ⁾)`, evaluated sample by sample.
pub fn bayes_risk_hat(
    phi_star: &Classification,
    samples: &[Classification],
    spec: &LossSpec,
) -> Result<f64, ProfilingError> {
    if samples.is_empty() {
        return Err(ProfilingError::NoSamples);
    }
    let mut total = 0.0;
    for s in samples {
        total += loss(phi_star, s, spec)?;
    }
    Ok(total / samples.len() as f64)
}

/// Per-hospital label counts over the posterior classifications. The Bayes
/// risk is separable given these: `BR̂(Φ*) = Σ_j cost_j(Φ*_j) / (J M)` with
/// `cost_j(c') = Σ_c n_jc w(c, c')`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskTable {
    pub scheme: Scheme,
    pub hospitals: usize,
    pub samples: usize,
    /// `counts[j * C + slot(c)]`.
    counts: Vec<u64>,
    cost: Vec<f64>,
}

impl RiskTable {
    pub fn new(samples: &[Classification], spec: &LossSpec) -> Result<Self, ProfilingError> {
        spec.validate()?;
        let first = samples.first().ok_or(ProfilingError::NoSamples)?;
        if !spec.matches(&first.scheme) {
            check_pair(first, first, spec)?;
        }
        let scheme = first.scheme;
        let j = first.len();
        let cats = scheme.categories();
        let c = cats.len();
        let mut counts = vec![0u64; j * c];
        for s in samples {
            check_pair(first, s, spec)?;
            for (h, label) in s.labels.iter().enumerate() {
                if !scheme.valid(*label) {
                    return Err(ProfilingError::BadLabel {
                        hospital: h,
                        label: *label,
                        scheme,
                    });
                }
                counts[h * c + scheme.slot(*label)] += 1;
            }
        }
        let mut cost = vec![0.0; j * c];
        for h in 0..j {
            for (k, chosen) in cats.iter().enumerate() {
                cost[h * c + k] = cats
                    .iter()
                    .enumerate()
                    .map(|(t, truth)| counts[h * c + t] as f64 * spec.weight(*truth, *chosen))
                    .sum();
            }
        }
        Ok(Self {
            scheme,
            hospitals: j,
            samples: samples.len(),
            counts,
            cost,
        })
    }

    fn c(&self) -> usize {
        self.scheme.categories().len()
    }

    pub fn count(&self, hospital: usize, label: u8) -> u64 {
        self.counts[hospital * self.c() + self.scheme.slot(label)]
    }

    /// Marginal posterior probability of each category, in
    /// [`Scheme::categories`] order.
    pub fn marginals(&self, hospital: usize) -> Vec<f64> {
        let c = self.c();
        self.counts[hospital * c..(hospital + 1) * c]
            .iter()
            .map(|n| *n as f64 / self.samples as f64)
            .collect()
    }

    fn cost(&self, hospital: usize, label: u8) -> f64 {
        self.cost[hospital * self.c() + self.scheme.slot(label)]
    }

    /// Bayes risk of a label vector; [`bayes_risk_hat`] up to rounding.
    pub fn risk(&self, labels: &[u8]) -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(h, l)| self.cost(h, *l))
            .sum();
        total / (self.hospitals as f64 * self.samples as f64)
    }

    /// Labels with the largest count per hospital (lowest label on ties).
    pub fn posterior_modes(&self) -> Vec<u8> {
        (0..self.hospitals)
            .map(|h| {
                let cats = self.scheme.categories();
                let mut best = cats[0];
                for &c in &cats[1..] {
                    if self.count(h, c) > self.count(h, best) {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    /// Number of top-k selections `k`, read off the samples.
    fn topk_size(&self) -> usize {
        if self.samples == 0 {
            return 0;
        }
        let ones: u64 = (0..self.hospitals).map(|h| self.count(h, 1)).sum();
        (ones / self.samples as u64) as usize
    }
}

fn lower(a: f64, b: f64) -> bool {
    a < b - RISK_TOL * b.abs().max(1.0)
}

fn close(a: f64, b: f64) -> bool {
    !lower(a, b) && !lower(b, a)
}

/// Hospitals fixed by the pre-processing step; `None` entries stay free.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSpace {
    pub scheme: Scheme,
    pub frozen: Vec<Option<u8>>,
    /// Top-k only: number of selected hospitals.
    pub k: usize,
}

impl CandidateSpace {
    /// Unrestricted space over `table`'s hospitals.
    pub fn full(table: &RiskTable) -> Self {
        Self {
            scheme: table.scheme,
            frozen: vec![None; table.hospitals],
            k: table.topk_size(),
        }
    }

    pub fn free(&self) -> Vec<usize> {
        (0..self.frozen.len()).filter(|h| self.frozen[*h].is_none()).collect()
    }

    /// Number of classifications in the space (saturating).
    pub fn size(&self) -> u128 {
        let free = self.free().len() as u128;
        match self.scheme {
            Scheme::Quadrant => 4u128.checked_pow(free as u32).unwrap_or(u128::MAX),
            Scheme::Topk { .. } => match self.remaining_k() {
                Some(r) => binomial(free, r as u128),
                None => 0,
            },
        }
    }

    fn remaining_k(&self) -> Option<usize> {
        let fixed_ones = self.frozen.iter().filter(|f| **f == Some(1)).count();
        self.k.checked_sub(fixed_ones)
    }

    pub fn contains(&self, labels: &[u8]) -> bool {
        labels.len() == self.frozen.len()
            && labels.iter().all(|l| self.scheme.valid(*l))
            && self
                .frozen
                .iter()
                .zip(labels)
                .all(|(f, l)| f.is_none_or(|f| f == *l))
            && match self.scheme {
                Scheme::Topk { .. } => labels.iter().filter(|l| **l == 1).count() == self.k,
                Scheme::Quadrant => true,
            }
    }
}

fn binomial(n: u128, k: u128) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        r = match r.checked_mul(n - i) {
            Some(v) => v / (i + 1),
            None => return u128::MAX,
        };
    }
    r
}

/// Freezes hospitals whose most likely category has posterior probability
/// above `1 − epsilon`. For top-k, if the frozen labels alone would exceed the
/// selected-set size (or leave too few hospitals to fill it), the freezes of
/// that label are dropped so the reduced space stays non-empty.
pub fn reduce_candidates(table: &RiskTable, epsilon: f64) -> Result<CandidateSpace, ProfilingError> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(ProfilingError::BadEpsilon(epsilon));
    }
    let mut space = CandidateSpace::full(table);
    for h in 0..table.hospitals {
        for &c in table.scheme.categories() {
            if table.count(h, c) as f64 / table.samples as f64 > 1.0 - epsilon {
                space.frozen[h] = Some(c);
            }
        }
    }
    if let Scheme::Topk { .. } = table.scheme {
        let ones = space.frozen.iter().filter(|f| **f == Some(1)).count();
        let zeros = space.frozen.iter().filter(|f| **f == Some(0)).count();
        let n = table.hospitals;
        if ones > space.k {
            space.frozen.iter_mut().filter(|f| **f == Some(1)).for_each(|f| *f = None);
        }
        if zeros > n - space.k {
            space.frozen.iter_mut().filter(|f| **f == Some(0)).for_each(|f| *f = None);
        }
    }
    Ok(space)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub labels: Vec<u8>,
    pub risk: f64,
    /// Classifications evaluated (brute force) or candidate moves tried
    /// (sequential).
    pub evaluated: u64,
    /// Sequential minimizer only.
    pub sweeps: usize,
}

/// Exhaustive minimizer of the Bayes risk over `space`; ties go to the
/// lexicographically smallest label vector.
pub fn brute_force_minimizer(
    table: &RiskTable,
    space: &CandidateSpace,
) -> Result<Minimum, ProfilingError> {
    let size = space.size();
    if size > BRUTE_FORCE_LIMIT {
        return Err(ProfilingError::TooLarge {
            size,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let free = space.free();
    let mut labels: Vec<u8> = space.frozen.iter().map(|f| f.unwrap_or(0)).collect();
    let mut best: Option<(f64, Vec<u8>)> = None;
    let mut evaluated = 0u64;
    let mut consider = |labels: &[u8]| {
        evaluated += 1;
        let r = table.risk(labels);
        let better = match &best {
            None => true,
            Some((br, bl)) => lower(r, *br) || (close(r, *br) && labels < bl.as_slice()),
        };
        if better {
            best = Some((r, labels.to_vec()));
        }
    };
    match space.scheme {
        Scheme::Quadrant => {
            for &h in &free {
                labels[h] = 1;
            }
            'outer: loop {
                consider(&labels);
                // odometer over the free hospitals, last index fastest
                for &h in free.iter().rev() {
                    if labels[h] < 4 {
                        labels[h] += 1;
                        continue 'outer;
                    }
                    labels[h] = 1;
                }
                break;
            }
        }
        Scheme::Topk { .. } => {
            let r = space.remaining_k().unwrap_or(usize::MAX);
            if r <= free.len() {
                let mut pick: Vec<usize> = (0..r).collect();
                loop {
                    for &h in &free {
                        labels[h] = 0;
                    }
                    for &p in &pick {
                        labels[free[p]] = 1;
                    }
                    consider(&labels);
                    if !next_combination(&mut pick, free.len()) {
                        break;
                    }
                }
            }
        }
    }
    let (risk, labels) = best.ok_or(ProfilingError::TooLarge { size: 0, limit: 0 })?;
    Ok(Minimum {
        labels,
        risk,
        evaluated,
        sweeps: 0,
    })
}

fn next_combination(pick: &mut [usize], n: usize) -> bool {
    let r = pick.len();
    let mut i = r;
    while i > 0 {
        i -= 1;
        if pick[i] < n - r + i {
            pick[i] += 1;
            for k in i + 1..r {
                pick[k] = pick[k - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Sequential updating from `start`: each sweep visits the free hospitals in a
/// fresh random order and moves a hospital to its best alternative label when
/// that strictly lowers the Bayes risk. For top-k, promoting (demoting) a
/// hospital is paired with demoting (promoting) a randomly chosen free partner
/// so the selected-set size is preserved. Stops after a sweep with no update.
pub fn sequential_minimizer(
    table: &RiskTable,
    space: &CandidateSpace,
    start: &[u8],
    seed: u64,
    stream_index: u64,
) -> Result<Minimum, ProfilingError> {
    if start.len() != table.hospitals {
        return Err(ProfilingError::Length(start.len(), table.hospitals));
    }
    if let Some((hospital, &label)) = start
        .iter()
        .enumerate()
        .find(|(_, l)| !table.scheme.valid(**l))
    {
        return Err(ProfilingError::BadLabel {
            hospital,
            label,
            scheme: table.scheme,
        });
    }
    if let Scheme::Topk { .. } = table.scheme {
        let got = start.iter().filter(|l| **l == 1).count();
        if got != space.k {
            return Err(ProfilingError::WrongCount {
                expected: space.k,
                got,
            });
        }
    }
    let mut labels = start.to_vec();
    // frozen hospitals take their fixed labels; top-k counts are restored by
    // swapping with free hospitals
    for (h, f) in space.frozen.iter().enumerate() {
        if let Some(f) = f {
            labels[h] = *f;
        }
    }
    if let Scheme::Topk { .. } = table.scheme {
        rebalance_topk(&mut labels, space, table);
    }
    let mut rng = stream(seed, TAG_PROFILE, stream_index);
    let mut order = space.free();
    let mut risk = table.risk(&labels);
    let mut evaluated = 0u64;
    let mut sweeps = 0;
    loop {
        sweeps += 1;
        order.shuffle(&mut rng);
        let mut updated = false;
        for &h in &order {
            let current = labels[h];
            let mut best: Option<(f64, Vec<(usize, u8)>)> = None;
            let moves: Vec<Vec<(usize, u8)>> = match table.scheme {
                Scheme::Quadrant => table
                    .scheme
                    .categories()
                    .iter()
                    .filter(|c| **c != current)
                    .map(|c| vec![(h, *c)])
                    .collect(),
                Scheme::Topk { .. } => {
                    let partners: Vec<usize> = space
                        .free()
                        .into_iter()
                        .filter(|p| *p != h && labels[*p] != current)
                        .collect();
                    if partners.is_empty() {
                        Vec::new()
                    } else {
                        let p = partners[rng.random_range(0..partners.len())];
                        vec![vec![(h, 1 - current), (p, current)]]
                    }
                }
            };
            for mv in moves {
                evaluated += 1;
                let saved: Vec<(usize, u8)> = mv.iter().map(|(i, _)| (*i, labels[*i])).collect();
                for (i, l) in &mv {
                    labels[*i] = *l;
                }
                let r = table.risk(&labels);
                for (i, l) in saved {
                    labels[i] = l;
                }
                if best.as_ref().is_none_or(|(br, _)| lower(r, *br)) {
                    best = Some((r, mv));
                }
            }
            if let Some((r, mv)) = best {
                if lower(r, risk) {
                    for (i, l) in mv {
                        labels[i] = l;
                    }
                    let after = table.risk(&labels);
                    if !(after < risk) {
                        return Err(ProfilingError::NotMonotone {
                            before: risk,
                            after,
                        });
                    }
                    risk = after;
                    updated = true;
                }
            }
        }
        if !updated {
            break;
        }
    }
    Ok(Minimum {
        labels,
        risk,
        evaluated,
        sweeps,
    })
}

/// Restores the selected-set size after frozen labels were imposed, flipping
/// free hospitals in ascending index order.
fn rebalance_topk(labels: &mut [u8], space: &CandidateSpace, _table: &RiskTable) {
    let free = space.free();
    let mut ones = labels.iter().filter(|l| **l == 1).count();
    for &h in &free {
        if ones > space.k && labels[h] == 1 {
            labels[h] = 0;
            ones -= 1;
        } else if ones < space.k && labels[h] == 0 {
            labels[h] = 1;
            ones += 1;
        }
    }
}

/// Runs the sequential minimizer from each start (start `i` uses random
/// stream `i`) and keeps the lowest risk; ties go to the earliest start.
pub fn multi_start_minimizer(
    table: &RiskTable,
    space: &CandidateSpace,
    starts: &[Vec<u8>],
    seed: u64,
) -> Result<Minimum, ProfilingError> {
    let mut best: Option<Minimum> = None;
    for (i, s) in starts.iter().enumerate() {
        let m = sequential_minimizer(table, space, s, seed, i as u64)?;
        if best.as_ref().is_none_or(|b| lower(m.risk, b.risk)) {
            best = Some(m);
        }
    }
    best.ok_or(ProfilingError::NoSamples)
}

/// `n` random starting classifications inside `space`, drawn from the profiling
/// stream at indices offset past the minimizer streams.
pub fn random_starts(space: &CandidateSpace, n: usize, seed: u64) -> Vec<Vec<u8>> {
    let mut rng = stream(seed, TAG_PROFILE, 1 << 32);
    (0..n)
        .map(|_| {
            let mut labels: Vec<u8> = space.frozen.iter().map(|f| f.unwrap_or(0)).collect();
            let free = space.free();
            match space.scheme {
                Scheme::Quadrant => {
                    for h in free {
                        labels[h] = rng.random_range(1..=4);
                    }
                }
                Scheme::Topk { .. } => {
                    let r = space.remaining_k().unwrap_or(0).min(free.len());
                    for h in free.choose_multiple(&mut rng, r) {
                        labels[*h] = 1;
                    }
                }
            }
            labels
        })
        .collect()
}

/// Per-sample classifications from a sample-major ratio matrix
/// (`theta1[m][j]`). `theta2` is required for the quadrant scheme.
pub fn sample_classifications(
    scheme: Scheme,
    theta1: &[Vec<f64>],
    theta2: Option<&[Vec<f64>]>,
) -> Result<Vec<Classification>, ProfilingError> {
    match scheme {
        Scheme::Topk { gamma_frac } => theta1.iter().map(|t| classify_topk(t, gamma_frac)).collect(),
        Scheme::Quadrant => {
            let theta2 = theta2.ok_or(ProfilingError::Length(theta1.len(), 0))?;
            if theta1.len() != theta2.len() {
                return Err(ProfilingError::Length(theta1.len(), theta2.len()));
            }
            theta1
                .iter()
                .zip(theta2)
                .map(|(a, b)| classify_quadrant(a, b))
                .collect()
        }
    }
}

/// Posterior median of each column of a sample-major matrix.
pub fn column_medians(theta: &[Vec<f64>]) -> Result<Vec<f64>, ProfilingError> {
    let first = theta.first().ok_or(ProfilingError::NoSamples)?;
    (0..first.len())
        .map(|j| {
            let mut col: Vec<f64> = theta.iter().map(|row| row[j]).collect();
            if col.iter().any(|v| !v.is_finite()) {
                return Err(ProfilingError::NonFinite(j));
            }
            col.sort_by(f64::total_cmp);
            Ok(quantile_sorted(&col, 0.5))
        })
        .collect()
}

/// Plug-in classification from the posterior medians.
pub fn plug_in(
    scheme: Scheme,
    theta1: &[Vec<f64>],
    theta2: Option<&[Vec<f64>]>,
) -> Result<Classification, ProfilingError> {
    let m1 = column_medians(theta1)?;
    match scheme {
        Scheme::Topk { gamma_frac } => classify_topk(&m1, gamma_frac),
        Scheme::Quadrant => {
            let m2 = column_medians(theta2.ok_or(ProfilingError::Length(theta1.len(), 0))?)?;
            classify_quadrant(&m1, &m2)
        }
    }
}

/// Settings of one profiling run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    pub scheme: Scheme,
    pub loss: LossSpec,
    /// Pre-processing threshold; `None` searches the full space.
    #[serde(default = "default_epsilon")]
    pub epsilon: Option<f64>,
    /// Random starts in addition to the plug-in start.
    #[serde(default = "default_random_starts")]
    pub random_starts: usize,
    /// Use exhaustive search when the candidate space fits the bound.
    #[serde(default)]
    pub exhaustive_when_small: bool,
}

fn default_epsilon() -> Option<f64> {
    Some(0.01)
}

fn default_random_starts() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileResult {
    pub scheme: Scheme,
    pub plug_in: Classification,
    pub loss_based: Vec<u8>,
    pub plug_in_risk: f64,
    pub risk: f64,
    pub marginals: Vec<Vec<f64>>,
    pub space: CandidateSpace,
    pub exhaustive: bool,
    pub sweeps: usize,
}

/// Plug-in and loss-based classifications for one ratio matrix.
pub fn profile(
    config: &ProfileConfig,
    theta1: &[Vec<f64>],
    theta2: Option<&[Vec<f64>]>,
    seed: u64,
) -> Result<ProfileResult, ProfilingError> {
    let samples = sample_classifications(config.scheme, theta1, theta2)?;
    let table = RiskTable::new(&samples, &config.loss)?;
    let plug = plug_in(config.scheme, theta1, theta2)?;
    let space = match config.epsilon {
        Some(e) => reduce_candidates(&table, e)?,
        None => CandidateSpace::full(&table),
    };
    let exhaustive = config.exhaustive_when_small && space.size() <= BRUTE_FORCE_LIMIT;
    let best = if exhaustive {
        brute_force_minimizer(&table, &space)?
    } else {
        let mut starts = vec![plug.labels.clone()];
        starts.extend(random_starts(&space, config.random_starts, seed));
        multi_start_minimizer(&table, &space, &starts, seed)?
    };
    Ok(ProfileResult {
        scheme: config.scheme,
        plug_in_risk: table.risk(&plug.labels),
        plug_in: plug,
        loss_based: best.labels,
        risk: best.risk,
        marginals: (0..table.hospitals).map(|h| table.marginals(h)).collect(),
        space,
        exhaustive,
        sweeps: best.sweeps,
    })
}

/// Square contingency table `rows[a][b]` over paired label vectors.
pub fn cross_tab(a: &[u8], b: &[u8], categories: &[u8]) -> Vec<Vec<usize>> {
    let idx = |l: u8| categories.iter().position(|c| *c == l);
    let mut t = vec![vec![0; categories.len()]; categories.len()];
    for (x, y) in a.iter().zip(b) {
        if let (Some(i), Some(k)) = (idx(*x), idx(*y)) {
            t[i][k] += 1;
        }
    }
    t
}

/// Joint top-k category from separate readmission and mortality top-k labels:
/// 1 = neither, 2 = mortality only, 3 = readmission only, 4 = both.
pub fn joint_topk_label(readmission: u8, death: u8) -> u8 {
    1 + 2 * readmission + death
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_threshold_example() {
        let c = classify_topk(&[0.5, 0.9, 1.1, 1.4], 0.5).unwrap();
        assert_eq!(c.labels, vec![1, 1, 0, 0]);
        assert!(!c.boundary_tie);
        let c = classify_topk(&[1.0; 5], 0.5).unwrap();
        assert_eq!(c.labels, vec![1, 1, 0, 0, 0]);
        assert!(c.boundary_tie);
        assert!(classify_topk(&[1.0, f64::NAN], 0.5).is_err());
        assert!(classify_topk(&[1.0], 1.0).is_err());
    }

    #[test]
    fn topk_counts() {
        assert_eq!(topk_count(4, 0.5), 2);
        assert_eq!(topk_count(9, 0.1), 0);
        assert_eq!(topk_count(10, 0.1), 1);
        assert_eq!(topk_count(264, 0.1), 26);
    }

    #[test]
    fn quadrant_examples() {
        assert_eq!(quadrant_label(1.2, 1.3), 1);
        assert_eq!(quadrant_label(1.2, 0.9), 2);
        assert_eq!(quadrant_label(0.8, 1.3), 3);
        assert_eq!(quadrant_label(0.8, 0.9), 4);
        assert_eq!(quadrant_label(1.0, 1.0), 4);
    }

    #[test]
    fn loss_examples() {
        let q = |l: Vec<u8>| Classification::new(l, Scheme::Quadrant).unwrap();
        let spec = LossSpec::unit_quadrant();
        let a = q(vec![1, 2, 3, 4]);
        assert_eq!(loss(&a, &a, &spec).unwrap(), 0.0);
        assert_eq!(loss(&a, &q(vec![2, 3, 4, 4]), &spec).unwrap(), 0.75);
        let t = Classification::new(vec![1, 0, 0, 0], Scheme::Topk { gamma_frac: 0.4 }).unwrap();
        assert!(matches!(
            loss(&a, &t, &spec),
            Err(ProfilingError::SchemeMismatch(..))
        ));
        assert!(matches!(
            loss(&t, &t, &spec),
            Err(ProfilingError::SchemeMismatch(..))
        ));
    }

    #[test]
    fn bayes_risk_mean_of_losses() {
        let q = |l: Vec<u8>| Classification::new(l, Scheme::Quadrant).unwrap();
        let star = q(vec![1, 1]);
        let samples = vec![q(vec![1, 1]), q(vec![1, 4])];
        let spec = LossSpec::unit_quadrant();
        assert_eq!(bayes_risk_hat(&star, &samples, &spec).unwrap(), 0.25);
        assert_eq!(RiskTable::new(&samples, &spec).unwrap().risk(&star.labels), 0.25);
    }

    #[test]
    fn combinations_enumerate_all() {
        let mut pick = vec![0, 1];
        let mut n = 1;
        while next_combination(&mut pick, 5) {
            n += 1;
        }
        assert_eq!(n, 10);
        assert_eq!(binomial(264, 26) > 1u128 << 100, true);
        assert_eq!(binomial(6, 2), 15);
    }

    #[test]
    fn quadrant_brute_force_guard() {
        let q = Classification::new(vec![1; 10], Scheme::Quadrant).unwrap();
        let table = RiskTable::new(&[q], &LossSpec::unit_quadrant()).unwrap();
        let err = brute_force_minimizer(&table, &CandidateSpace::full(&table)).unwrap_err();
        assert_eq!(
            err,
            ProfilingError::TooLarge {
                size: 1 << 20,
                limit: BRUTE_FORCE_LIMIT
            }
        );
    }
}
